"""
Django settings for the sdgdlab project.

The project has no web surface: Django provides the management-command CLI,
logging configuration and the test runner. Every tunable below can be
overridden from the environment or a `.env` file next to manage.py.
"""

from pathlib import Path
import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

def config(key, default=None, cast=None):
    """Simple config function to read environment variables"""
    value = os.environ.get(key, default)
    if value is None:
        raise ValueError(f"Environment variable '{key}' not found and no default provided")
    if cast and isinstance(value, str):
        try:
            if cast == bool:
                # Handle boolean values
                return value.lower() in ('true', '1', 'yes', 'on')
            return cast(value)
        except (ValueError, TypeError) as e:
            raise ValueError(f"Failed to cast '{key}' value '{value}' to {cast.__name__}: {e}")
    return value

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Only used by Django internals; nothing here is signed or served.
SECRET_KEY = config('SECRET_KEY', default='sdgdlab-local-only')

DEBUG = config('DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'sdgd',
]

# No models: the offline datasets, checkpoints and reports are plain files.
DATABASES = {}

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


# SDGD configuration

SDGD_LOG_LEVEL = config('SDGD_LOG_LEVEL', default='INFO')
SDGD_OUTPUT_DIR = config('SDGD_OUTPUT_DIR', default=str(BASE_DIR / 'runs'), cast=Path)
SDGD_CODE_VERSION = config('SDGD_CODE_VERSION', default='')  # empty -> sdgd.__version__
SDGD_RUN_SLOW_TESTS = config('SDGD_RUN_SLOW_TESTS', default=False, cast=bool)
SDGD_REFERENCE_EPISODES = config('SDGD_REFERENCE_EPISODES', default=1000, cast=int)  # R_rand episodes


# Logging

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'sdgd': {
            'handlers': ['console'],
            'level': SDGD_LOG_LEVEL,
            'propagate': False,
        },
    },
}
