"""Exception taxonomy shared across the toolkit.

Config/format/validation problems are caller mistakes (CLI exit code 1);
numeric and integrity failures happen mid-run (CLI exit code 2).
"""


class PeerDistillError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(PeerDistillError):
    """Bad or inconsistent configuration (unknown keys, out-of-range values)."""


class FormatError(PeerDistillError):
    """A file does not parse as the format it claims to be."""


class ValidationError(PeerDistillError):
    """Parsed data violates a documented invariant (shapes, labels, splits)."""


class NumericError(PeerDistillError):
    """Non-finite values or numeric divergence at runtime."""


class IntegrityError(PeerDistillError):
    """Stored artifact fails its own consistency guard (checksum, manifest)."""
