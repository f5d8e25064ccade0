"""Exception hierarchy shared across the pipeline.

Every error that can surface from a CLI stage carries a short machine-parsable
code and an exit code. Programming-contract violations (wrong shapes, bad
arguments) use plain ValueError instead.
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_PREREQUISITE = 3
EXIT_RUNTIME = 4


class PipelineError(Exception):
    """Base class for pipeline failures (CLI exit code 4)."""

    exit_code = EXIT_RUNTIME
    code = "runtime"


class ConfigError(PipelineError):
    """Invalid configuration value or unsupported option."""

    exit_code = EXIT_CONFIG
    code = "config"


class SchemaError(ConfigError):
    """Manifest or table contents violate the documented file schema."""

    code = "schema"


class MissingArtifactError(PipelineError):
    """A required upstream artifact (cache entry, run, fused table) is absent."""

    exit_code = EXIT_MISSING_PREREQUISITE
    code = "missing-prerequisite"


class DegenerateInputError(PipelineError):
    """Input leaves an operation undefined (e.g. a zero-mean colour channel)."""

    code = "degenerate-input"


class WeightStoreError(MissingArtifactError):
    """Pretrained weights unavailable or failed integrity checks."""

    code = "weight-store"


class PreprocessError(PipelineError):
    """Preprocessing failed for a specific image; message carries the image_id."""

    code = "preprocess"


class InferenceError(PipelineError):
    """Model produced unusable outputs (e.g. non-finite logits)."""

    code = "inference"


class FusionError(PipelineError):
    """Fusion inputs are inconsistent (mismatched image sets, excluded children)."""

    code = "fusion"


class EvaluationError(PipelineError):
    """Prediction table does not line up with the evaluation split."""

    code = "evaluation"
