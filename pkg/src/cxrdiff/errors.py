"""Shared error types, mapped to CLI exit codes."""


class CxrDiffError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(CxrDiffError):
    """Invalid configuration value or unknown key."""

    exit_code = 2


class MissingPrerequisiteError(CxrDiffError):
    """A required checkpoint or input artifact is absent."""

    exit_code = 3


class DataIOError(CxrDiffError):
    """Malformed manifest, unreadable image, or bad checkpoint bytes."""

    exit_code = 4


class NumericError(CxrDiffError):
    """NaN/Inf encountered during optimization or evaluation."""

    exit_code = 5
