"""Exception types shared across the package."""

from __future__ import annotations


class FailoverError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(FailoverError, ValueError):
    pass


class SetupError(FailoverError):
    """A channel or endpoint could not be established."""


class Interrupted(FailoverError):
    """A blocking call was woken by a failure notice instead of completing."""

    # args must rebuild the exception: simpy re-raises ``type(e)(*e.args)``
    def __init__(self, notice: object = None):
        super().__init__(notice)
        self.notice = notice

    def __str__(self) -> str:
        return f"interrupted: {self.notice!r}"


class Aborted(FailoverError):
    """A transfer was cut off because its channel closed."""


class ProtocolError(FailoverError):
    pass


class PlanViolation(FailoverError):
    """Point-to-point traffic addressed to a peer outside the comm plan."""


class InitError(FailoverError):
    pass


class RendezvousTimeout(FailoverError, TimeoutError):
    pass


class RestoreError(FailoverError):
    """No source could provide the state needed for a restore."""


class UnrecoverableVersion(RestoreError):
    """The requested iteration is older than both retained optimizer versions."""


class ChecksumError(RestoreError):
    pass


class AddressingError(FailoverError):
    pass
