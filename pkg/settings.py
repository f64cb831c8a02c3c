import os


class Config:
    THREADS = int(os.getenv('CGEMU_THREADS', '1'))
    LOG_LEVEL = os.getenv('CGEMU_LOG_LEVEL', 'INFO')
