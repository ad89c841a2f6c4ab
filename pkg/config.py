import os
import logging

from data_model import ValidationError

# --- CONFIGURATION ---
try:
    from dotenv import load_dotenv
    load_dotenv()
except Exception:
    pass

ENV_PREFIX = "CONPARC_"

DEFAULTS = {
    "SEED": 0,
    "THREADS": 1,
    "LOG_LEVEL": "INFO",
    "RADIUS": 2,
    "STOP_THRESHOLD": 0.95,
    "MAX_ITERATIONS": 10,
    "RESTARTS": 10,
}

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def get_setting(name, default=None, cast=None):
    """Read CONPARC_<name> from the environment, falling back to the default.

    `cast` converts the raw string; a value that cannot be converted raises
    ValidationError naming the variable.
    """
    key = ENV_PREFIX + name
    if default is None:
        default = DEFAULTS.get(name)
    raw = os.getenv(key)
    if raw is None or raw.strip() == "":
        return default
    if cast is None:
        cast = type(default) if default is not None else str
    try:
        return cast(raw.strip())
    except (TypeError, ValueError):
        raise ValidationError(f"{key} has invalid value {raw!r}")


def default_seed():
    return get_setting("SEED", cast=int)


def default_threads():
    return get_setting("THREADS", cast=int)


def configure_logging(level=None):
    level = level or get_setting("LOG_LEVEL", cast=str)
    numeric = logging.getLevelName(str(level).upper())
    if not isinstance(numeric, int):
        raise ValidationError(f"unknown log level {level!r}")
    logging.basicConfig(level=numeric, format=LOG_FORMAT, force=True)
    return numeric
