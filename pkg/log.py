import logging
import os
import sys

LOG_ENV_VAR = "ATTNVERIFY_LOG"
LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def configure_logging(level: str | None = None) -> int:
    """Install one stderr handler on the root logger; the level comes from ATTNVERIFY_LOG."""
    name = (level or os.environ.get(LOG_ENV_VAR) or "error").lower()
    resolved = LEVELS.get(name, logging.ERROR)
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(resolved)
    return resolved
