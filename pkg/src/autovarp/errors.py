"""Exception hierarchy.

Every failure the tool can classify maps onto one of these; the CLI turns
them into exit codes (validation errors -> 3, runtime failures -> 1).
"""


class AutoVarpError(Exception):
    """Base class for all classified errors."""


# plan-io ---------------------------------------------------------------

class ValidationError(AutoVarpError):
    """Invalid user input (plan files, flags, override files)."""


class ParseError(ValidationError):
    pass


class SchemaError(ValidationError):
    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class PlanReferenceError(ValidationError):
    """A name refers to a definition that does not exist."""

    def __init__(self, kind, name, where=""):
        self.kind = kind
        self.name = name
        msg = f"unknown {kind} {name!r}"
        if where:
            msg += f" (referenced from {where})"
        super().__init__(msg)


class UnknownFunction(ValidationError):
    pass


# mesh ------------------------------------------------------------------

class FormatError(ValidationError):
    pass


class GeometryError(ValidationError):
    pass


class EmptyElectrode(ValidationError):
    pass


class MissingUVC(ValidationError):
    pass


class UnknownCavity(ValidationError):
    pass


class UncoveredTag(ValidationError):
    def __init__(self, tags):
        self.tags = sorted(int(t) for t in tags)
        super().__init__(f"mesh tags not covered by any configuration: {self.tags}")


# numerics --------------------------------------------------------------

class NumericalBlowup(AutoVarpError):
    pass


class LossOfCapture(AutoVarpError):
    pass


class SingularElement(AutoVarpError):
    pass


class LinearSolveFailure(AutoVarpError):
    pass


class NoPropagation(AutoVarpError):
    pass


class TuningDiverged(AutoVarpError):
    pass


class NoActiveNodes(AutoVarpError):
    pass


class MissingTrajectory(AutoVarpError):
    pass


class UnreachableTissue(UserWarning):
    pass


# checkpoints / pipeline ------------------------------------------------

class VersionMismatch(AutoVarpError):
    pass


class NodeCountMismatch(AutoVarpError):
    pass


class MissingUpstream(AutoVarpError):
    def __init__(self, path, reason="", remediation=""):
        self.path = str(path)
        msg = f"missing upstream checkpoint {self.path}"
        if reason:
            msg += f": {reason}"
        if remediation:
            msg += f". {remediation}"
        super().__init__(msg)


class MissingData(AutoVarpError):
    def __init__(self, stage, detail=""):
        self.stage = stage
        super().__init__(f"no data for stage {stage}" + (f": {detail}" if detail else ""))


class SpecError(ValidationError):
    """Inconsistent study settings (CI array, cycle counts, flags)."""
