"""Exception hierarchy shared by all modules."""


class GarmentError(Exception):
    """Base class for every error raised by garmentdiff."""


class ValidationError(GarmentError, ValueError):
    """An input value lies outside its documented domain."""


class StructuralError(GarmentError, ValueError):
    """Inputs disagree in shape, count or topology."""


class SingularTransformError(GarmentError):
    """A blended skinning transform cannot be inverted."""

    def __init__(self, vertex, det):
        self.vertex = int(vertex)
        self.det = float(det)
        super().__init__(
            f"blended skinning transform of vertex {self.vertex} is singular "
            f"(det={self.det:.3e})"
        )


class TrainingDivergenceError(GarmentError):
    """A non-finite loss or gradient appeared during optimisation."""

    def __init__(self, message, tensor=None):
        self.tensor = tensor
        super().__init__(message)
