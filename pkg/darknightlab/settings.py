"""
Django settings for the darknightlab project.

"""

import os

BASE_DIR = os.path.dirname(os.path.dirname(__file__))

SECRET_KEY = os.environ.get('SECRET_KEY', 'insecure_default_key')

DEBUG = True


# Application definition

INSTALLED_APPS = (
    'tensors',
    'masking',
    'gradcodec',
    'leakage',
    'pipeline',
    'runs',
)

# Nothing here is stored in a database.
DATABASES = {}

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

TIME_ZONE = 'UTC'

USE_TZ = True


# Blinding settings

DARKNIGHT_NOISE_MEAN = float(os.environ.get('DARKNIGHT_NOISE_MEAN', 0.0))

DARKNIGHT_NOISE_VARIANCE = float(os.environ.get('DARKNIGHT_NOISE_VARIANCE', 1e4))

DARKNIGHT_INTEGRITY_THRESHOLD = float(os.environ.get('DARKNIGHT_INTEGRITY_THRESHOLD', 1e-6))

# Size of the thread pool the untrusted context uses for per-equation
# products. 1 runs them inline.
DARKNIGHT_UNTRUSTED_WORKERS = int(os.environ.get('DARKNIGHT_UNTRUSTED_WORKERS', 1))

DARKNIGHT_TENSOR_DTYPE = os.environ.get('DARKNIGHT_TENSOR_DTYPE', 'float64')


# Logging

DARKNIGHT_LOG_LEVEL = os.environ.get('DARKNIGHT_LOG_LEVEL', 'INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        app: {
            'handlers': ['console'],
            'level': DARKNIGHT_LOG_LEVEL,
            'propagate': False,
        }
        for app in INSTALLED_APPS
    },
}

environ_debug = os.environ.get('DJANGO_DEBUG')
if environ_debug is not None:
    DEBUG = bool(int(environ_debug))

# Import local settings overrides if they exist
try:
    from darknightlab.local_settings import *
except ImportError as e:
    pass
