"""Exception types shared across the package."""


class PathdetectError(Exception):
    """Base class for all errors raised by this package."""


# --- model files / networks -------------------------------------------------

class ModelFormatError(PathdetectError):
    """Weight file violates the MDLW format."""


class BadMagic(ModelFormatError):
    pass


class TruncatedWeights(ModelFormatError):
    def __init__(self, layer, message=""):
        self.layer = layer
        super().__init__(message or f"truncated weight blob at layer {layer}")


class DimensionMismatch(ModelFormatError):
    def __init__(self, layer, message=""):
        self.layer = layer
        super().__init__(message or f"incompatible dimensions at layer {layer}")


class NonFiniteWeights(ModelFormatError):
    def __init__(self, layer, message=""):
        self.layer = layer
        super().__init__(message or f"non-finite weights at layer {layer}")


class ShapeMismatch(PathdetectError):
    """Input tensor shape does not match what the network expects."""


class TrainingDiverged(PathdetectError):
    """Loss became non-finite during training."""


# --- datasets ----------------------------------------------------------------

class DataFormatError(PathdetectError):
    """Dataset file is malformed (bad magic, ragged rows, ...)."""


class CountMismatch(DataFormatError):
    """Image and label files disagree on item count."""


class EmptyClass(PathdetectError):
    def __init__(self, class_id, side="normal or anomaly"):
        self.class_id = class_id
        super().__init__(f"no {side} samples predicted as class {class_id}")


# --- SVDD ---------------------------------------------------------------------

class AllIdentical(PathdetectError):
    """Every pairwise distance is zero and no bandwidth fallback is configured."""


# --- path search ----------------------------------------------------------------

class NoAlternativeNeuron(PathdetectError):
    """Layer has width 1, so no different neuron can be selected."""


# --- detector -------------------------------------------------------------------

class UnderpopulatedClass(PathdetectError):
    def __init__(self, class_id, count, minimum):
        self.class_id = class_id
        self.count = count
        super().__init__(
            f"class {class_id} has only {count} normal test members (need >= {minimum})"
        )


class FingerprintMismatch(PathdetectError):
    """Detector bundle was built for a different model file."""


class NotCalibrated(PathdetectError):
    """Bundle must be calibrated before detection."""


class DegenerateBounds(PathdetectError):
    """score_min == score_max; normalization undefined."""


class CalibrationError(PathdetectError):
    """Calibration could not produce a usable ensemble."""


# --- CLI / config -----------------------------------------------------------------

class ConfigError(PathdetectError):
    """Invalid run configuration or unreadable referenced file."""
