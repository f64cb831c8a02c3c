import logging

from flask import Flask
from settings import Config

app = Flask(__name__)
app.config.from_object(Config)
logging.basicConfig(
    level=app.config['LOG_LEVEL'],
    format='%(asctime)s %(levelname)s %(name)s: %(message)s',
)

from . import commands  # noqa: E402,F401
