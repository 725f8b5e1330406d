"""
Django settings for the dsd_lab project.

The project has no web surface: the installed apps contribute numerical
library modules and management commands (train, sample, verify, diagnose,
plot, compare).
"""

from pathlib import Path
import os

from dotenv import load_dotenv

load_dotenv()
# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# Only used by Django internals; nothing here is served.
SECRET_KEY = os.getenv("DJANGO_SECRET_KEY", "dsd-lab-local-only")

DEBUG = os.getenv("DJANGO_DEBUG", "0") == "1"

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    "autodiff",
    "diagnostics",
    "objectives",
    "network",
    "augmentation",
    "data_repository",
    "experiments",
    "sampler",
    "integration",
]

MIDDLEWARE = []


# Database
# The apps define no models; sqlite keeps Django's checks satisfied.

DATABASES = {
    "default": {
        "ENGINE": "django.db.backends.sqlite3",
        "NAME": BASE_DIR / "db.sqlite3",
    }
}


# Internationalization

LANGUAGE_CODE = "en-us"

TIME_ZONE = "UTC"

USE_I18N = False

USE_TZ = True


DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"


# Laboratory settings

# Default output root for runs, checkpoints, plots and samples
DSD_OUT_DIR = Path(os.getenv("DSD_OUT_DIR", BASE_DIR / "runs"))

DSD_DEFAULT_SEED = int(os.getenv("DSD_DEFAULT_SEED", "0"))

# Show tqdm progress bars during training
DSD_PROGRESS = os.getenv("DSD_PROGRESS", "1") == "1"


# Logging

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "standard": {
            "format": "%(asctime)s %(levelname)s %(name)s: %(message)s",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "standard",
        },
    },
    "root": {
        "handlers": ["console"],
        "level": os.getenv("DSD_LOG_LEVEL", "INFO"),
    },
}
