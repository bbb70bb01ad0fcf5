import logging
from pathlib import Path

logger = logging.getLogger("dpvger")

_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def setup_logger(name: str, level: int = logging.INFO) -> logging.Logger:
    logger = logging.getLogger(name)
    logger.setLevel(level)
    handler = logging.StreamHandler()
    formatter = logging.Formatter(_FORMAT)
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    return logger


def attach_run_log(path: Path, level: int = logging.INFO) -> logging.FileHandler:
    """Mirror package logging into a run's log file until the handler is detached."""
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode="w", encoding="utf-8")
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter(_FORMAT))
    logger.addHandler(handler)
    if logger.level == logging.NOTSET or logger.level > level:
        logger.setLevel(level)
    return handler


def detach_run_log(handler: logging.FileHandler) -> None:
    handler.flush()
    logger.removeHandler(handler)
    handler.close()
