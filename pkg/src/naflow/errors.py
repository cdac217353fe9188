"""Exception hierarchy for the naflow engine."""


class NaflowError(Exception):
    """Base class for all engine errors."""


class FormatError(NaflowError):
    """Malformed model directory, manifest, weight blob, or input file."""


class ShapeError(NaflowError):
    """Layer parameter shapes inconsistent with propagated activation shapes."""


class ShapeMismatch(NaflowError):
    """Two tensors that must agree in shape do not."""


class NonFinite(NaflowError):
    """A NaN or Inf appeared where only finite values are allowed."""


class SingularMatrix(NaflowError):
    """LU factorization hit a pivot below the singularity threshold."""


class RankDeficient(NaflowError):
    """Even the ridge-regularized fallback solve produced non-finite values."""


class BadClass(NaflowError):
    """Target class id out of range for the classifier head."""


class DegenerateNorm(NaflowError):
    """L2 normalization requested on a vector with near-zero norm."""


class ZeroVector(NaflowError):
    """Cosine similarity of a vector with near-zero norm."""


class OrthogonalPair(NaflowError):
    """Channel contribution weights are undefined: query and support are
    orthogonal (similarity score is zero)."""


class IndexOutOfRange(NaflowError):
    """A stored max-pool index does not address the layer input."""


class Unreachable(NaflowError):
    """No stacking depth reaches the required neuron count before the
    backbone ends."""


class OutOfRange(NaflowError):
    """A value expected in [0, 1] is outside it."""
