"""Exception hierarchy shared across the toolkit.

Everything derives from :class:`MtkitError`, which the CLI maps to exit
code 2 (data error). Unexpected exceptions fall through to exit code 3.
"""


class MtkitError(Exception):
    """Base class for all toolkit-level errors."""


# corpus
class CorpusFormatError(MtkitError):
    """Malformed corpus input (blank line, misaligned files, bad vocab file)."""


class EmptyCorpus(MtkitError):
    pass


class InsufficientData(MtkitError):
    """Requested split sizes exceed the corpus size."""


# model
class ShapeMismatch(MtkitError):
    pass


class EmptyInput(MtkitError):
    pass


class MissingCache(MtkitError):
    """backward() called without the caches produced by forward_loss()."""


class DropoutActive(MtkitError):
    """Gradient checking requires a deterministic forward pass (dropout 0)."""


class InvalidEpsilon(MtkitError):
    pass


class CheckpointError(MtkitError):
    """Corrupt or incompatible checkpoint container."""


# training
class NonFiniteGradient(MtkitError):
    pass


# decode
class DimensionMismatch(MtkitError):
    """Attention matrix width disagrees with the source token count."""


# evaluation
class LengthMismatch(MtkitError):
    """Hypothesis and reference lists differ in length."""


class EmptyReference(MtkitError):
    pass


class TooFewSentences(MtkitError):
    """Fewer sentences than requested length bins."""


# afeval
class MisalignedFiles(MtkitError):
    pass


class DuplicateSystemLabel(MtkitError):
    pass


class DuplicateCampaign(MtkitError):
    pass


class UnknownCampaign(MtkitError):
    pass


class UnknownEvaluator(MtkitError):
    pass


class UnknownItem(MtkitError):
    """Rating refers to an item or blind key that does not exist."""


class CampaignClosed(MtkitError):
    pass


class OutOfRangeScore(MtkitError):
    """Adequacy/fluency scores must be integers in 1..4."""
