"""Exception hierarchy. Every error carries a short machine-readable ``category``."""


class ZenFoleyError(Exception):
    category = "error"


class DimensionError(ZenFoleyError, ValueError):
    category = "dimension"


class ContractError(ZenFoleyError, ValueError):
    category = "contract"


class FormatError(ZenFoleyError, ValueError):
    category = "format"


class AlignmentError(ZenFoleyError, ValueError):
    category = "alignment"


class ConfigError(ZenFoleyError, ValueError):
    category = "config"


class TrainingError(ZenFoleyError, RuntimeError):
    category = "training"

    def __init__(self, message, batch_ids=()):
        super().__init__(f"{message} (batch ids: {list(batch_ids)})")
        self.batch_ids = list(batch_ids)


class VersioningError(ZenFoleyError):
    category = "versioning"


class CoverageError(ZenFoleyError, ValueError):
    category = "coverage"


class MissingFilesError(ZenFoleyError, FileNotFoundError):
    category = "missing-files"

    def __init__(self, paths):
        self.paths = [str(p) for p in paths]
        super().__init__("missing or unreadable: " + ", ".join(self.paths))


class MagicError(FormatError):
    category = "format-magic"


class TruncatedError(FormatError):
    category = "format-truncated"


class NonFiniteError(FormatError):
    category = "format-nonfinite"
