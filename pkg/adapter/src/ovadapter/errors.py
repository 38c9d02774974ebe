class AdapterError(Exception):
    """Base class; exit code 2."""

    exit_code = 2


class StartupError(AdapterError):
    """A model failed to load."""

    exit_code = 3


class InputError(AdapterError):
    """An image or tensor input is unusable."""
