"""Structured error types shared across the toolkit.

Every error carries a short machine-parseable category so the CLI can map
failures onto stable exit codes without string-matching messages.
"""
from __future__ import annotations


class TransferLabError(Exception):
    """Base class for all toolkit errors."""

    category = "data"
    exit_code = 3

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = context


class UsageError(TransferLabError):
    """Bad arguments or configuration supplied by the caller."""

    category = "usage"
    exit_code = 2


class ShapeError(TransferLabError):
    """Tensor shapes are inconsistent with the layer or model contract."""

    category = "shape"


class InputError(TransferLabError):
    """A value is outside the domain an operation accepts."""

    category = "input"


class DependencyError(TransferLabError):
    """A required upstream artifact (usually a base checkpoint) is missing."""

    category = "dependency"


class CheckpointError(TransferLabError):
    """Base class for checkpoint file problems."""

    category = "checkpoint"


class CorruptCheckpointError(CheckpointError):
    """File is truncated or structurally invalid."""

    category = "checkpoint-corrupt"


class ChecksumError(CheckpointError):
    """A stored blob fails its CRC; names the offending layer."""

    category = "checkpoint-checksum"


class VersionError(CheckpointError):
    """Format version is not supported by this build."""

    category = "checkpoint-version"


class FingerprintError(CheckpointError):
    """Checkpoint architecture does not match the receiving model spec."""

    category = "checkpoint-fingerprint"


class CycleError(TransferLabError):
    """A class hierarchy contains a cycle; context carries a witness path."""

    category = "hierarchy-cycle"


class OverlapError(TransferLabError):
    """Two semantic subtrees share classes; context lists witnesses."""

    category = "hierarchy-overlap"


class AssignmentError(TransferLabError):
    """A manual leftover assignment does not cover exactly the leftovers."""

    category = "hierarchy-assignment"


class CoverageError(TransferLabError):
    """A results table is missing rows an aggregation needs."""

    category = "coverage"


class NumericError(TransferLabError):
    """Training or checking produced a non-finite value."""

    category = "numeric"
    exit_code = 4
