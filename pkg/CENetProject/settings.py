"""
Django settings for CENetProject project.

The toolkit uses Django for its settings layer, logging configuration,
management commands (the command-line surface) and test runner. There is
no database and no HTTP surface.

For more information on this file, see
https://docs.djangoproject.com/en/5.1/topics/settings/
"""

from pathlib import Path
import os
from dotenv import load_dotenv

load_dotenv()
# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# Django refuses to start without one; nothing here is signed.
SECRET_KEY = os.getenv('SECRET_KEY', 'cenet-insecure-default-key-for-local-runs')

DEBUG = os.getenv('CENET_DEBUG', '0') == '1'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'CENetApp',
]

MIDDLEWARE = []


# No database: every command and test runs on plain files.
DATABASES = {}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Toolkit settings
CENET_LOG_LEVEL = os.getenv('CENET_LOG_LEVEL', 'INFO').upper()

# Default output directory when a run config leaves output.dir empty
CENET_OUTPUT_DIR = os.getenv('CENET_OUTPUT_DIR', str(BASE_DIR / 'runs'))

# Convergence and ablation runs take minutes; opt in explicitly
CENET_RUN_SLOW_TESTS = os.getenv('CENET_RUN_SLOW_TESTS', '0') == '1'

CENET_GRADCHECK_SEED = int(os.getenv('CENET_GRADCHECK_SEED', '0'))


# Logging configuration
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'simple': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': 'WARNING',
    },
    'loggers': {
        'django': {
            'handlers': ['console'],
            'level': 'WARNING',
            'propagate': False,
        },
        'CENetApp': {
            'handlers': ['console'],
            'level': CENET_LOG_LEVEL,
            'propagate': False,
        },
    },
}
