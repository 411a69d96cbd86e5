"""Turn the review column of a train interaction file into embedding rows.

Alignment is the whole contract: output row r encodes exactly the review
text of train interaction r, each review encoded independently.  The input
must therefore be the *train* partition file; test-time reviews never pass
through here.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .embedding_io import write_embedding_file
from .encoders import resolve_encoder

MANIFEST_FORMAT = "symcere-export"
MANIFEST_VERSION = 1


class ExportError(Exception):
    """Raised for unreadable, misaligned, or degenerate export inputs."""


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def read_train_reviews(path: str | Path) -> list[str]:
    """Review texts of a tab-separated train file, one per line in order.

    Columns: user, item, timestamp[, review].  A first line whose timestamp
    column is not an integer is treated as a header.  Missing or empty review
    fields come back as empty strings; any other malformed line is an error
    because it would silently shift every following row.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ExportError(f"cannot read {path}: {exc}") from exc
    reviews: list[str] = []
    for lineno, line in enumerate(text.splitlines()):
        if not line:
            continue
        parts = line.split("\t", 3)
        if len(parts) < 3:
            raise ExportError(f"{path}: line {lineno + 1}: fewer than 3 fields")
        try:
            int(parts[2])
        except ValueError:
            if lineno == 0 and not reviews:
                continue
            raise ExportError(
                f"{path}: line {lineno + 1}: non-integer timestamp {parts[2]!r}"
            ) from None
        reviews.append(parts[3] if len(parts) > 3 else "")
    if not reviews:
        raise ExportError(f"{path}: no interaction rows")
    return reviews


def export_embeddings(
    interactions_path: str | Path,
    encoder_id: str,
    out_path: str | Path,
    max_tokens: int = 256,
) -> dict:
    """Encode every train review and write the embedding file plus manifest.

    Rows are L2-normalized.  Reviews that carry no encodable signal (empty,
    or reduced to nothing by tokenization) get the fallback row: the mean of
    all informative rows, renormalized.  Their indices are recorded in the
    manifest so downstream analysis can exclude them.

    Returns the manifest dict; the manifest file is written next to the
    output as ``<out>.manifest.json``.
    """
    if max_tokens < 1:
        raise ExportError(f"max_tokens must be >= 1, got {max_tokens}")
    reviews = read_train_reviews(interactions_path)
    encoder = resolve_encoder(encoder_id)

    raw = encoder.encode(reviews, max_tokens=max_tokens)
    norms = np.linalg.norm(raw, axis=1)
    informative = norms > 1e-12
    if not informative.any():
        raise ExportError(
            "every review is empty or carries no encodable tokens; "
            "no fallback row can be derived"
        )
    rows = np.zeros_like(raw)
    rows[informative] = raw[informative] / norms[informative, None]

    fallback_rows = np.flatnonzero(~informative)
    if fallback_rows.size:
        fallback = rows[informative].mean(axis=0)
        fnorm = np.linalg.norm(fallback)
        if fnorm <= 1e-12:
            raise ExportError("informative rows cancel; fallback row is degenerate")
        rows[~informative] = fallback / fnorm

    write_embedding_file(out_path, rows)

    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "encoder": encoder.identifier,
        "dim": int(rows.shape[1]),
        "pooling": encoder.pooling,
        "count": int(rows.shape[0]),
        "max_tokens": int(max_tokens),
        "interactions_sha256": file_sha256(interactions_path),
        "fallback_rows": [int(r) for r in fallback_rows],
    }
    manifest_path = manifest_path_for(out_path)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def manifest_path_for(out_path: str | Path) -> Path:
    return Path(f"{out_path}.manifest.json")


def read_export_manifest(path: str | Path) -> dict:
    try:
        manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ExportError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ExportError(f"{path}: invalid JSON: {exc}") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ExportError(f"{path}: not an export manifest")
    return manifest
