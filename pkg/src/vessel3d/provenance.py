"""Artifact hashing and JSON sidecars linking pipeline stages together.

Every binary artifact (dictionary, feature matrix) gets a sibling
``<name>.json`` sidecar carrying its config echo and the SHA-256 hashes of the
inputs it was derived from. Sidecars are written with sorted keys and no
timestamps so identical runs produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .errors import ValidationError


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def canonical_json(payload: dict) -> str:
    """Deterministic JSON text: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def sidecar_path(artifact_path: str | Path) -> Path:
    artifact_path = Path(artifact_path)
    return artifact_path.with_name(artifact_path.name + ".json")


def write_sidecar(artifact_path: str | Path, payload: dict) -> Path:
    path = sidecar_path(artifact_path)
    path.write_text(canonical_json(payload), encoding="utf-8")
    return path


def read_sidecar(artifact_path: str | Path) -> dict:
    path = sidecar_path(artifact_path)
    if not path.is_file():
        raise ValidationError(f"missing sidecar: {path}")
    return json.loads(path.read_text(encoding="utf-8"))
