"""Dual vector-quantization codebooks with learnable projection heads.

Patch tokens and global tokens quantize through separate codebooks in
separate low-dimensional code spaces (defaults 8 and 12).  A token is
projected D -> d by its head, snapped to the Euclidean-nearest codebook
entry (ties break to the lowest index), and mapped back d -> D by the
inverse head.  Codebook entries learn by exponential moving averages of
the projections assigned to them; the commitment loss pulls the
continuous tokens toward their quantized versions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError
from .nanonet import ModelConfig, Params, TokenSequence

__all__ = [
    "Codebook",
    "QuantizedSequence",
    "init_codebooks",
    "quantize",
    "commit_loss",
    "codebook_usage",
    "ema_update",
]

EMA_DECAY = 0.99


@dataclass
class Codebook:
    """K entries of dimension d plus EMA bookkeeping for training."""

    kind: str  # "patch" or "global"
    dim: int
    size: int
    entries: np.ndarray = field(repr=False)  # (K, d)
    ema_count: np.ndarray = field(repr=False)  # (K,)
    ema_sum: np.ndarray = field(repr=False)  # (K, d)

    def __post_init__(self):
        if self.kind not in ("patch", "global"):
            raise ConfigError(f"unknown codebook kind {self.kind!r}")
        if self.size < 2:
            raise ConfigError("codebook needs at least 2 entries")
        if self.entries.shape != (self.size, self.dim):
            raise ConfigError(
                f"entries shape {self.entries.shape} != {(self.size, self.dim)}"
            )
        if not np.isfinite(self.entries).all():
            raise ConfigError("codebook entries must be finite")


@dataclass
class QuantizedSequence:
    """Codebook indices plus the de-projected token vectors."""

    indices: np.ndarray  # (n,) int64
    vectors: np.ndarray = field(repr=False)  # (n, D)
    origin: list = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.indices.shape[0])


def init_codebooks(cfg: ModelConfig) -> tuple[Codebook, Codebook]:
    """Seeded symmetric-uniform codebooks sized from the model config."""
    rng = np.random.default_rng([cfg.seed, 0xC0DE])

    def make(kind: str, dim: int) -> Codebook:
        bound = math.sqrt(3.0 / dim)
        entries = rng.uniform(-bound, bound, size=(cfg.codebook_size, dim))
        return Codebook(
            kind=kind,
            dim=dim,
            size=cfg.codebook_size,
            entries=entries,
            ema_count=np.ones(cfg.codebook_size),
            ema_sum=entries.copy(),
        )

    return make("patch", cfg.patch_code_dim), make("global", cfg.global_code_dim)


def nearest_entries(projections: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Index of the Euclidean-nearest entry per row; ties pick the lowest index."""
    if projections.shape[1] != codebook.dim:
        raise ConfigError(
            f"projection dim {projections.shape[1]} != codebook dim {codebook.dim}"
        )
    e = codebook.entries
    d2 = (
        (projections * projections).sum(axis=1, keepdims=True)
        - 2.0 * projections @ e.T
        + (e * e).sum(axis=1)
    )
    return np.argmin(d2, axis=1)


def _route(params: Params, kind: str, patch_cb: Codebook, global_cb: Codebook):
    if kind == "patch":
        return params.patch_head, params.patch_head_inv, patch_cb
    if kind == "global":
        return params.global_head, params.global_head_inv, global_cb
    raise ConfigError(f"cannot quantize a token of kind {kind!r}")


def quantize(
    z_aug: TokenSequence,
    patch_cb: Codebook,
    global_cb: Codebook,
    params: Params,
) -> QuantizedSequence:
    """Assign every token of an augmented sequence to its codebook entry."""
    n = len(z_aug)
    if n == 0:
        raise DomainError("cannot quantize an empty sequence")
    d = params.cfg.token_dim
    indices = np.zeros(n, dtype=np.int64)
    vectors = np.zeros((n, d))
    for kind in ("global", "patch"):
        rows = [i for i, tag in enumerate(z_aug.origin) if tag[0] == kind]
        if not rows:
            continue
        head, inv, cb = _route(params, kind, patch_cb, global_cb)
        proj = z_aug.tokens[rows] @ head
        idx = nearest_entries(proj, cb)
        indices[rows] = idx
        vectors[rows] = cb.entries[idx] @ inv
    for tag in z_aug.origin:
        if tag[0] not in ("global", "patch"):
            raise ConfigError(f"cannot quantize a token of kind {tag[0]!r}")
    return QuantizedSequence(indices=indices, vectors=vectors, origin=list(z_aug.origin))


def commit_loss(z_aug: TokenSequence, q_aug: QuantizedSequence) -> float:
    """Mean squared distance between continuous and quantized token rows."""
    if len(z_aug) != len(q_aug):
        raise DomainError(f"length mismatch: {len(z_aug)} vs {len(q_aug)}")
    diff = z_aug.tokens - q_aug.vectors
    return float(np.einsum("ij,ij->i", diff, diff).mean())


def codebook_usage(history, codebook_size: int) -> tuple[np.ndarray, float]:
    """Per-entry hit counts and the fraction of entries used at least once."""
    counts = np.zeros(codebook_size, dtype=np.int64)
    for indices in history:
        for i in np.asarray(indices, dtype=np.int64):
            counts[i] += 1
    used = int((counts > 0).sum())
    return counts, used / codebook_size


def ema_update(
    codebook: Codebook,
    projections: np.ndarray,
    indices: np.ndarray,
    decay: float = EMA_DECAY,
) -> None:
    """Move assigned entries toward the mean of their projections (in place)."""
    k = codebook.size
    hit = np.zeros(k)
    np.add.at(hit, indices, 1.0)
    summed = np.zeros_like(codebook.ema_sum)
    np.add.at(summed, indices, projections)
    codebook.ema_count *= decay
    codebook.ema_count += (1.0 - decay) * hit
    codebook.ema_sum *= decay
    codebook.ema_sum += (1.0 - decay) * summed
    touched = hit > 0
    codebook.entries[touched] = (
        codebook.ema_sum[touched] / codebook.ema_count[touched, None]
    )
