"""Exception hierarchy shared across the pipeline."""


class VodError(Exception):
    pass


# manifest
class MissingFile(VodError, FileNotFoundError):
    pass


class SchemaViolation(VodError, ValueError):
    def __init__(self, field, message=""):
        self.field = field
        super().__init__(f"{field}: {message}" if message else field)


class DuplicateId(VodError, ValueError):
    pass


class SplitLeak(VodError, ValueError):
    pass


class EmptyResult(VodError, ValueError):
    pass


class WriteFailure(VodError, OSError):
    pass


# segmenter
class DecodeFailure(VodError, OSError):
    pass


class EmptyVideo(VodError, ValueError):
    pass


class DegenerateBox(VodError, ValueError):
    pass


class IndexOutOfRange(VodError, IndexError):
    pass


# diffvol
class TooShort(VodError, ValueError):
    pass


class CorruptShard(VodError, ValueError):
    pass


class VersionMismatch(VodError, ValueError):
    pass


# backbone
class InvalidConfig(VodError, ValueError):
    pass


class ShapeMismatch(VodError, ValueError):
    pass


class NonFiniteActivation(VodError, FloatingPointError):
    pass


class LayerNotFound(VodError, KeyError):
    pass


# trainer / evaluator
class SingleClassData(VodError, ValueError):
    pass


class DivergedLoss(VodError, FloatingPointError):
    pass


class TooFewSamples(VodError, ValueError):
    pass


class MissingVolumes(VodError, FileNotFoundError):
    pass


class InvalidSeverity(VodError, ValueError):
    pass


class DimMismatch(VodError, ValueError):
    pass


# cli
class UnknownKey(VodError, KeyError):
    pass


class ConfigTypeError(VodError, TypeError):
    def __init__(self, key, expected, got):
        self.key, self.expected, self.got = key, expected, got
        super().__init__(f"{key}: expected {expected}, got {got}")


class ConflictingFlags(VodError, ValueError):
    pass


class MissingStageInput(VodError, FileNotFoundError):
    def __init__(self, artifact):
        self.artifact = artifact
        super().__init__(artifact)
