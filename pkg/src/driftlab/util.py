import hashlib
import json
import os

# 17 significant digits round-trips any float64 exactly.
FLOAT_FORMAT = "%.17g"

def safe_path(relative_path):
    """Return an absolute path to a file in the same directory as this module.
    Removes dependency on the current working directory."""

    return os.path.abspath(os.path.join(os.path.dirname(__file__),
                                        relative_path))

def fmt_float(value) -> str:
    return FLOAT_FORMAT % float(value)

def canonical_json(obj) -> str:
    """Stable JSON text: sorted keys, no whitespace variance."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))

def content_hash(obj, length: int = 16) -> str:
    """Short sha256 of the canonical JSON form of obj."""
    digest = hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()
    return digest[:length]

def file_checksum(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
