"""Canonical serialization and text normalization shared across modules.

Everything that leaves the process (graph files, sessions, trajectories,
wire payloads) goes through :func:`canonical_dumps` so that identical
in-memory values always produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import re
from typing import Any

_WS_RE = re.compile(r"\s+")

FLOAT_PLACES = 6


def normalize_text(text: str) -> str:
    """Case-fold, trim, and collapse runs of whitespace to single spaces."""
    return _WS_RE.sub(" ", text.casefold()).strip()


def round_floats(obj: Any, places: int = FLOAT_PLACES) -> Any:
    """Recursively round floats so serialized output is platform-stable."""
    if isinstance(obj, float):
        return round(obj, places)
    if isinstance(obj, dict):
        return {key: round_floats(value, places) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(value, places) for value in obj]
    return obj


def canonical_dumps(obj: Any) -> str:
    """Serialize to canonical JSON: sorted keys, compact separators, UTF-8,
    floats fixed at 6 decimal places."""
    return json.dumps(
        round_floats(obj),
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    )


def sha256_hex(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
