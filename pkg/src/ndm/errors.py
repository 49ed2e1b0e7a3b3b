"""Exception hierarchy shared by every ndm module."""


class NdmError(Exception):
    """Base class for all errors raised by ndm."""


class ParameterError(NdmError, ValueError):
    """An invalid parameter value. ``field`` names the offending field."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class ValidationError(NdmError, ValueError):
    """One or more configuration or plan violations."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class SpecError(NdmError, ValueError):
    """A network spec, perturbation or stimulation target is inconsistent."""


class ShapeError(NdmError, ValueError):
    pass


class DomainError(NdmError, ValueError):
    pass


class FitError(NdmError, RuntimeError):
    pass


class CoverageError(NdmError, ValueError):
    pass


class StateError(NdmError, RuntimeError):
    pass


class PersistenceError(NdmError, OSError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


class FormatError(PersistenceError):
    pass


class CorruptionError(PersistenceError):
    pass


class NumericalDivergenceError(NdmError, FloatingPointError):
    def __init__(self, neuron_index, t_ms):
        super().__init__(f"non-finite state at neuron {neuron_index} (t={t_ms:.2f} ms)")
        self.neuron_index = int(neuron_index)
        self.t_ms = float(t_ms)
