"""Exception types shared across the package."""


class AssetFormatError(ValueError):
    """A serialized asset is malformed, truncated, or internally inconsistent."""


class DegenerateTriangleError(ValueError):
    """A mesh triangle is too small or collinear to carry a local frame."""

    def __init__(self, triangle_index: int, message: str = ""):
        self.triangle_index = triangle_index
        super().__init__(message or f"degenerate triangle at index {triangle_index}")


class NumericalDivergenceError(RuntimeError):
    """An optimization loop produced a non-finite loss and was aborted."""
