"""Exception taxonomy shared by every protofew module.

The split matters for the CLI, which maps error classes to exit codes:
config problems exit 2, data/protocol problems exit 3, numeric failures
exit 4. ``ContractViolation`` signals a caller bug and is not remapped.
"""


class ProtofewError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(ProtofewError):
    """An operation was called with arguments that break its contract
    (shape mismatch, non-square table, label out of range, ...)."""


class NumericDomainError(ProtofewError):
    """A numeric value left its legal domain: NaN/Inf input or output,
    a non-finite training loss, a zero-probability event."""


class ConfigError(ProtofewError):
    """A configuration is unusable: unknown keys, unrealizable encoder
    geometry, malformed config file."""


class DataError(ProtofewError):
    """Dataset ingestion or validation failed: missing directories,
    undecodable files, overlapping split sections."""


class ProtocolError(ProtofewError):
    """An episodic protocol is infeasible for the dataset at hand
    (too few classes or too few samples per class)."""
