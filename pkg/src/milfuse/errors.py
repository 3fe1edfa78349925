"""Exception and warning types shared across the package."""


class MilfuseError(Exception):
    """Base class for all milfuse errors."""


# --- tensor engine ---

class ShapeMismatchError(MilfuseError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(MilfuseError):
    """A committed value contains NaN or Inf."""


class NotScalarError(MilfuseError):
    """backward() was asked to start from a non-scalar tensor."""


class DetachedRootError(MilfuseError):
    """backward() root was not produced on the active tape."""


class LabelOutOfRangeError(MilfuseError):
    """Class index outside [0, C)."""


class NonDeterministicError(MilfuseError):
    """Two evaluations of the same function at the same point differ."""


# --- attention ---

class InvalidLandmarkCountError(MilfuseError):
    """Landmark count outside [1, sequence length]."""


class ZeroMatrixWarning(UserWarning):
    """Pseudoinverse of an all-zero matrix; the zero matrix is returned."""


# --- fusion / heads ---

class ModeTextMismatchError(MilfuseError):
    """Fusion mode and presence of text tokens disagree."""


class EmptyTargetError(MilfuseError):
    """Caption loss requires a target sequence."""


class TokenOutOfVocabError(MilfuseError):
    """Token id outside the vocabulary."""


# --- data ---

class BadMagicError(MilfuseError):
    """File does not start with the expected magic bytes."""


class DimMismatchError(MilfuseError):
    """Header dimensions disagree with the payload."""


class InvalidSpecError(MilfuseError):
    """Synthetic corpus specification is inconsistent."""


class InvalidFractionsError(MilfuseError):
    """Split fractions are negative or do not sum to one."""


# --- training ---

class MissingGradError(MilfuseError):
    """Optimizer step requested before gradients were populated."""


class StepOutOfRangeError(MilfuseError):
    """Schedule queried outside [0, total_steps]."""


class EmptySplitError(MilfuseError):
    """The requested dataset split contains no bags."""


class DivergedLossError(MilfuseError):
    """Training loss became non-finite."""


# --- configuration ---

class ConfigError(MilfuseError):
    """Base class for configuration validation failures."""


class UnknownKeyError(ConfigError):
    """Configuration contains a key that is not a known field."""


class ConfigTypeError(ConfigError):
    """Configuration value has the wrong type."""


class ConfigRangeError(ConfigError):
    """Configuration value is outside its legal range."""
