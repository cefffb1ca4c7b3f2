"""Shared exception types, aligned with the CLI exit-code contract."""


class SchemaError(Exception):
    """Configuration malformed or violating the strict schema (exit code 2)."""


class NumericalCheckError(Exception):
    """A numerical check failed beyond tolerance (exit code 3)."""


class CapacityError(Exception):
    """Problem size exceeds a documented capacity cap (exit code 4)."""
