"""Exception types shared across the package."""


class MmembedError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(MmembedError, ValueError):
    """Operands have incompatible shapes."""


class DegenerateEmbeddingError(MmembedError, ValueError):
    """A row to be normalized has (near-)zero norm, signalling a collapsed encoder."""


class TrainingDivergenceError(MmembedError, ArithmeticError):
    """A gradient or loss became non-finite during training."""


class GradientCheckError(MmembedError, ArithmeticError):
    """The finite-difference check could not be completed (non-finite loss)."""


class ConfigurationError(MmembedError, ValueError):
    """Invalid or inconsistent configuration values."""


class EmptyCorpusError(MmembedError, ValueError):
    """An operation requires data but the corpus (or split) is empty."""


class DegenerateCaptionError(MmembedError, ValueError):
    """A caption token/index sequence is empty."""


class VocabularyError(MmembedError, ValueError):
    """A token index is outside the vocabulary, or the vocabulary is inconsistent."""


class UnknownLanguageError(MmembedError, ValueError):
    """A requested language code is not present in the corpus."""


class MissingCaptionError(MmembedError, ValueError):
    """An image lacks a caption in a required language."""


class InsufficientLanguagesError(MmembedError, ValueError):
    """An operation needs at least two languages."""


class CorpusFormatError(MmembedError, ValueError):
    """A corpus file is malformed; the message carries file/line context."""


class ProtocolError(MmembedError, ValueError):
    """A retrieval-evaluation precondition is violated (empty truth set, k too large)."""


class AggregationError(MmembedError, ValueError):
    """Reports with mismatched protocols cannot be aggregated."""


class CheckpointMismatchError(MmembedError, ValueError):
    """A checkpoint is incompatible with the supplied corpus/vocabulary."""
