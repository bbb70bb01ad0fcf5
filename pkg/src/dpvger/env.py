import os
import re
from pathlib import Path
from typing import Optional

MNIST_DIR_ENV = "DPVGER_MNIST_DIR"

_PLACEHOLDER = re.compile(r"\$\{([^}]+)\}")


class ConfigurationError(Exception):
    pass


def expand_env_vars(value: str) -> str:
    """Substitute every ``${NAME}`` in a config path from os.environ."""

    def _lookup(match: re.Match[str]) -> str:
        name = match.group(1)
        if name not in os.environ:
            raise ConfigurationError(
                f"Config path {value!r} uses ${{{name}}}, which is not set."
            )
        return os.environ[name]

    return os.path.expanduser(_PLACEHOLDER.sub(_lookup, value))


def mnist_dir_from_env() -> Optional[Path]:
    raw = os.environ.get(MNIST_DIR_ENV, "").strip()
    return Path(expand_env_vars(raw)) if raw else None
