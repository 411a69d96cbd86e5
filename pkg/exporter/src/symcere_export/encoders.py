"""Deterministic text encoders.

The default is a signed hashed bag of unigrams and bigrams: no fitted state,
no external weights, bit-reproducible across machines and runs, which is
what a cacheable export artifact needs.  A transformer backend is available
as ``hf:<model-name-or-path>`` when torch, transformers, and local weights
are present; it mean-pools the final hidden states in inference mode.
"""

from __future__ import annotations

import hashlib
import re

import numpy as np

_TOKEN = re.compile(r"[a-z0-9]+")


class EncoderError(Exception):
    """Raised when an encoder id cannot be resolved or a backend fails."""


def tokenize(text: str, max_tokens: int) -> list[str]:
    """Lowercased alphanumeric runs, truncated to max_tokens."""
    return _TOKEN.findall(text.lower())[:max_tokens]


class HashedBagEncoder:
    """Signed feature hashing over unigrams and adjacent bigrams.

    Each feature picks a bucket from the high bits of its blake2b digest and
    a sign from the low bit, so collisions cancel rather than pile up in
    expectation.  Output rows are raw sums; the export step normalizes.
    """

    pooling = "signed-hash-sum"

    def __init__(self, dim: int = 256):
        if dim < 1:
            raise EncoderError(f"encoder dimension must be >= 1, got {dim}")
        self.dim = int(dim)

    @property
    def identifier(self) -> str:
        return f"hashed-bag-{self.dim}"

    def encode(self, texts: list[str], max_tokens: int = 256) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for r, text in enumerate(texts):
            tokens = tokenize(text, max_tokens)
            features = tokens + [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]
            for feature in features:
                digest = hashlib.blake2b(
                    feature.encode("utf-8"), digest_size=8
                ).digest()
                h = int.from_bytes(digest, "little")
                out[r, (h >> 1) % self.dim] += 1.0 if h & 1 else -1.0
        return out


class TransformerEncoder:
    """Mean-pooled final hidden states of a local transformer checkpoint.

    Inference mode only (no dropout), padding masked out of the mean.  Loaded
    lazily so the default export path has no heavyweight dependencies.
    """

    pooling = "mean"

    def __init__(self, model_id: str, batch_size: int = 32):
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise EncoderError(
                f"transformer backend requires torch and transformers: {exc}"
            ) from exc
        try:
            self.tokenizer = AutoTokenizer.from_pretrained(model_id)
            self.model = AutoModel.from_pretrained(model_id)
        except Exception as exc:
            raise EncoderError(f"cannot load text encoder {model_id!r}: {exc}") from exc
        self.model.eval()
        self._torch = torch
        self.model_id = model_id
        self.batch_size = batch_size
        self.dim = int(self.model.config.hidden_size)

    @property
    def identifier(self) -> str:
        return f"hf:{self.model_id}"

    def encode(self, texts: list[str], max_tokens: int = 256) -> np.ndarray:
        torch = self._torch
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        with torch.no_grad():
            for start in range(0, len(texts), self.batch_size):
                chunk = list(texts[start : start + self.batch_size])
                batch = self.tokenizer(
                    chunk,
                    padding=True,
                    truncation=True,
                    max_length=max_tokens,
                    return_tensors="pt",
                )
                hidden = self.model(**batch).last_hidden_state
                mask = batch["attention_mask"].unsqueeze(-1).to(hidden.dtype)
                pooled = (hidden * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1.0)
                out[start : start + len(chunk)] = pooled.double().cpu().numpy()
        return out


_HASHED = re.compile(r"^hashed-bag(?:-(\d+))?$")


def resolve_encoder(encoder_id: str):
    """Map an encoder id string to a constructed encoder.

    Accepted forms: ``hashed-bag`` (dimension 256), ``hashed-bag-<dim>``,
    and ``hf:<model-name-or-path>``.
    """
    m = _HASHED.match(encoder_id)
    if m:
        return HashedBagEncoder(int(m.group(1)) if m.group(1) else 256)
    if encoder_id.startswith("hf:"):
        model_id = encoder_id[3:]
        if not model_id:
            raise EncoderError("empty model id after 'hf:'")
        return TransformerEncoder(model_id)
    raise EncoderError(
        f"unknown encoder id {encoder_id!r}; expected 'hashed-bag[-DIM]' or 'hf:MODEL'"
    )
