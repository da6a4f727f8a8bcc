class SpecError(ValueError):
    """An architecture plan, schedule or config violates its invariants."""


class StructuralError(RuntimeError):
    """Feature maps disagree at a point where the plan says they must line up."""


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointError(RuntimeError):
    pass


class PrerequisiteError(RuntimeError):
    """A CLI command ran before the command that produces its inputs."""
