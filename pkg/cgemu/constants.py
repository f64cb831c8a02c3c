import math


SYSTEMS = ('ks', 'brusselator', 'l96')
SYSTEM_TAGS = {'ks': 0, 'brusselator': 1, 'l96': 2}
PRESETS = ('paper', 'desk')
MODES = ('tl', 'baseline')

BLOWUP_THRESHOLD = 1e6
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

DROPOUT_RATE = 0.3
TBPTT_LEN = 100
BATCH_SIZE = 32
PHASE1_EPOCHS = 20
PATIENCE = 25
N_SEEDS = 15

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

FD_STEP = 1e-5
FD_DENOMINATOR_FLOOR = 1e-3
FD_TOLERANCE = 1e-6

CONSTANT_SCALE_RTOL = 1e-12

CI_Z = 1.96
INDICATOR_THRESHOLD = 1.0
WARMUP_STEPS = 100

DATASET_MAGIC = b'CGD1'
MODEL_MAGIC = b'CGM1'
FORMAT_VERSION = 1
SPLITS = ('train', 'val', 'holdout')

# Архитектура и скорость обучения для каждой системы:
# (GRU units, dense X, dense Y, learning rate, фаза 2 в эпохах).
ARCHITECTURES = {
    'ks': (8, 8, 16, 0.001, 200),
    'brusselator': (8, 64, 64, 0.0003, 400),
    'l96': (32, 32, 4, 0.001, 250),
}
