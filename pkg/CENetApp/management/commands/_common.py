"""
Shared plumbing for the management commands: config loading and the
exception -> exit code contract (0 ok, 1 verification failure, 2 config,
3 data, 4 numeric).
"""

import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

from django.core.management.base import CommandError

from ...config import RunConfig, load_run_config
from ...exceptions import (
    ConfigurationError,
    ContractError,
    DataError,
    IntegrityError,
    NumericError,
    ShapeMismatchError,
)

logger = logging.getLogger("CENetApp.commands")

EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


@contextmanager
def exit_codes() -> Iterator[None]:
    try:
        yield
    except ShapeMismatchError as e:
        # weights that do not fit the configured model are a configuration problem
        raise CommandError(f"incompatible weights: {e}", returncode=EXIT_CONFIG) from e
    except (ConfigurationError, ContractError) as e:
        raise CommandError(str(e), returncode=EXIT_CONFIG) from e
    except (DataError, IntegrityError, FileNotFoundError) as e:
        raise CommandError(str(e), returncode=EXIT_DATA) from e
    except NumericError as e:
        logger.error(f"❌ Numeric failure diagnostics: {e.diagnostics}")
        raise CommandError(str(e), returncode=EXIT_NUMERIC) from e


def read_config(path: Optional[str]) -> RunConfig:
    if not path:
        return RunConfig()
    return load_run_config(path)


def dataset_root(cfg: RunConfig, evaluation: bool = False) -> Path:
    root = (cfg.data.eval_root if evaluation else None) or cfg.data.root
    if not root:
        raise ConfigurationError("data.root is not set in the run config")
    return Path(root)
