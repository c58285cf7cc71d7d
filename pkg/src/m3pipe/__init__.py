"""Multilingual vision-language corpus pipeline and MMMU evaluation harness."""

from m3pipe.errors import (
    IntegrityError,
    M3Error,
    ProtocolError,
    TransportError,
    ValidationError,
)
from m3pipe.records import (
    LANGUAGES,
    TARGET_LANGUAGES,
    EvalItem,
    Manifest,
    Sample,
    TextPair,
    Turn,
)

__version__ = "0.1.0"

__all__ = [
    "LANGUAGES",
    "TARGET_LANGUAGES",
    "EvalItem",
    "IntegrityError",
    "M3Error",
    "Manifest",
    "ProtocolError",
    "Sample",
    "TextPair",
    "TransportError",
    "Turn",
    "ValidationError",
]
