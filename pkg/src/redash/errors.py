"""Exception hierarchy shared by every module.

Each class carries an ``exit_class`` used by the CLI to map failures onto
process exit codes (validation / protocol / IO).
"""


class ReDashError(Exception):
    exit_class = "validation"


# -- validation ---------------------------------------------------------------

class NonCoprime(ReDashError):
    pass


class ModulusTooSmall(ReDashError):
    pass


class OutOfRange(ReDashError):
    pass


class InvalidScaleFactor(ReDashError):
    pass


class UnrealizableScale(ReDashError):
    pass


class RangeOverflow(ReDashError):
    pass


class ModulusMismatch(ReDashError):
    pass


class ShapeMismatch(ReDashError):
    pass


class ChoiceOutOfRange(ReDashError):
    pass


# -- protocol -----------------------------------------------------------------

class ProtocolError(ReDashError):
    exit_class = "protocol"


class AuthFailure(ProtocolError):
    pass


class CircuitMismatch(ProtocolError):
    pass


class PhaseViolation(ProtocolError):
    pass


class VersionMismatch(ProtocolError):
    pass


class MalformedFrame(ProtocolError):
    pass


class RemoteError(ProtocolError):
    """The peer reported a failure through an Error message."""

    def __init__(self, code, message=""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.message = message


# -- io -----------------------------------------------------------------------

class TransportError(ReDashError):
    exit_class = "io"
