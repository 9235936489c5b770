"""Exception hierarchy for the matching pipeline."""


class MifError(Exception):
    """Base class for all pipeline errors."""


class DegenerateHomography(MifError):
    pass


class PointAtInfinity(MifError):
    pass


class InsufficientMatches(MifError):
    pass


class EstimationFailed(MifError):
    pass


class NoKeypoints(MifError):
    pass


class FormatError(MifError):
    pass


class ShapeMismatch(MifError, ValueError):
    pass


class NonFiniteData(MifError, ValueError):
    pass


class EmptyFeatureSet(MifError, ValueError):
    pass


class DegenerateCluster(MifError):
    pass


class EmptyEvaluation(MifError, ValueError):
    pass


class NonFiniteLoss(MifError):
    def __init__(self, batch_id, value):
        super().__init__(f"non-finite loss {value!r} at batch {batch_id}")
        self.batch_id = batch_id
        self.value = value
