"""Module settings and the exception hierarchy shared by every rego module.
"""
import logging
from typing import Any

import cachu

logger = logging.getLogger(__name__)

_settings: dict[str, Any] = {
    'rundir': 'runs',
    'datadir': 'data',
    'workers': 1,
    'nan_check': True,
    'log_level': 'INFO',
    }

cachu.configure(backend_default='memory')


def configure(
    rundir: str | None = None,
    datadir: str | None = None,
    workers: int | None = None,
    nan_check: bool | None = None,
    log_level: str | None = None,
) -> None:
    """Configure module defaults.

    Call once at startup; keys left as None keep their current value.

    Example:
        >>> import rego
        >>> rego.configure(rundir='/tmp/rego-runs', workers=1, nan_check=True)
    """
    if rundir is not None:
        _settings['rundir'] = rundir
    if datadir is not None:
        _settings['datadir'] = datadir
    if workers is not None:
        if workers < 1:
            raise ValueError(f'workers must be >= 1, got {workers}')
        _settings['workers'] = workers
    if nan_check is not None:
        _settings['nan_check'] = nan_check
    if log_level is not None:
        _settings['log_level'] = log_level.upper()


def get_settings() -> dict[str, Any]:
    """Get current module settings.
    """
    return _settings


class RegoError(Exception):
    """Root of every error raised deliberately by rego.
    """


class DimensionError(RegoError, ValueError):
    """Raised when tensor shapes or feature widths disagree.
    """


class GradientError(RegoError, RuntimeError):
    """Raised on an invalid backward pass.
    """


class NonFiniteError(RegoError, ArithmeticError):
    """Raised when a loss or cost becomes NaN or infinite.
    """

    def __init__(self, message: str, op: str | None = None) -> None:
        super().__init__(message)
        self.op = op


class ManifestError(RegoError, ValueError):
    """Raised when a checkpoint manifest is missing or disagrees with a request.
    """


def shape_str(shape: tuple[int, ...]) -> str:
    """Render a shape as `AxBxC` for error messages.
    """
    return 'x'.join(str(s) for s in shape) or 'scalar'
