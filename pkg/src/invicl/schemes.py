from enum import Enum


class Scheme(str, Enum):
    """Attention layout family for in-context learning."""

    AR = "ar"
    PREFIX = "prefix"
    BOE = "boe"
    INVICL = "invicl"


class PEScheme(str, Enum):
    ABSOLUTE = "absolute"
    SYMMETRIC = "symmetric"
    NONE = "none"
