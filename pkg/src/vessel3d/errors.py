"""Exception types shared across the package."""


class Vessel3dError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(Vessel3dError, ValueError):
    """Input data, configuration, or artifact consistency violation.

    Raised for malformed files, dimension/size mismatches, bad labels,
    provenance hash mismatches, and other precondition failures. Maps to
    CLI exit code 2.
    """
