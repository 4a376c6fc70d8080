"""Miniature deterministic attention encoder/decoder in pure numpy.

Everything runs in float64 with hand-written backward passes so that
analytic gradients can be checked against central finite differences to
tight tolerance.  The encoder embeds patches, adds a learned positional
table, prepends k learnable global tokens, and runs ``depth`` pre-norm
blocks of single-head softmax attention plus a GELU FFN.  The decoder
shares the block design (with its own weights), reuses the positional
table on its fixed slot grid, unembeds every slot to a patch vector,
averages overlaps, and clamps to [0, 1].

Gradient convention: backward passes accumulate into a plain dict keyed
by the same names ``Params.named_arrays`` yields, so finite-difference
loops and the optimizer can walk parameters uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np
from scipy.special import erf

from .errors import CapacityError, ConfigError
from .imagegrid import Image, PatchGrid, PatchLayout, make_layout, reassemble_raw
from . import imagegrid

__all__ = [
    "ModelConfig",
    "TokenSequence",
    "Params",
    "init_params",
    "encode",
    "encode_forward",
    "encode_backward",
    "build_decoder_input",
    "decode",
    "decode_forward",
    "decode_backward",
    "zero_grads",
]

_LN_EPS = 1e-5
_BLOCK_KEYS = (
    "ln1_g", "ln1_b", "wq", "wk", "wv", "wo",
    "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
)


@dataclass(frozen=True)
class ModelConfig:
    """Geometry and sizing of one tokenizer model."""

    image_height: int
    image_width: int
    channels: int
    token_dim: int = 16
    num_global: int = 16
    depth: int = 3
    patch_size: int = 16
    overlap_rate: float = 0.0
    codebook_size: int = 4096
    patch_code_dim: int = 8
    global_code_dim: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.token_dim < max(self.patch_code_dim, self.global_code_dim):
            raise ConfigError(
                f"token_dim {self.token_dim} smaller than a code dimension"
            )
        if self.num_global < 0:
            raise ConfigError("num_global must be >= 0")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.codebook_size < 2:
            raise ConfigError("codebook_size must be >= 2")
        if min(self.image_height, self.image_width, self.channels) < 1:
            raise ConfigError("image dimensions must be >= 1")
        # raises InvalidLayout if the patch does not fit
        imagegrid.patch_count(
            self.image_height, self.image_width, self.patch_size, self.overlap_rate
        )

    def layout(self) -> PatchLayout:
        return make_layout(
            self.image_height, self.image_width, self.channels,
            self.patch_size, self.overlap_rate,
        )

    @property
    def patch_total(self) -> int:
        lay = self.layout()
        return lay.rows * lay.cols

    @property
    def patch_len(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class TokenSequence:
    """Continuous token matrix with per-row provenance tags.

    Tags are ("global", i), ("patch", grid_index), or ("mask", -1).
    """

    tokens: np.ndarray  # (n, D)
    origin: list

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ConfigError(f"tokens must be 2-D, got shape {self.tokens.shape}")
        if len(self.origin) != self.tokens.shape[0]:
            raise ConfigError(
                f"{len(self.origin)} origin tags for {self.tokens.shape[0]} tokens"
            )

    def __len__(self) -> int:
        return self.tokens.shape[0]


@dataclass
class Params:
    """All learnable tensors of one model, float64 throughout."""

    cfg: ModelConfig
    embed_w: np.ndarray
    embed_b: np.ndarray
    positional: np.ndarray
    global_tokens: np.ndarray
    mask_token: np.ndarray
    unembed_w: np.ndarray
    unembed_b: np.ndarray
    patch_head: np.ndarray
    patch_head_inv: np.ndarray
    global_head: np.ndarray
    global_head_inv: np.ndarray
    enc_blocks: list = field(default_factory=list)
    dec_blocks: list = field(default_factory=list)

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """(name, array) pairs in the fixed checkpoint order."""
        yield "embed_w", self.embed_w
        yield "embed_b", self.embed_b
        yield "positional", self.positional
        yield "global_tokens", self.global_tokens
        yield "mask_token", self.mask_token
        yield "unembed_w", self.unembed_w
        yield "unembed_b", self.unembed_b
        yield "patch_head", self.patch_head
        yield "patch_head_inv", self.patch_head_inv
        yield "global_head", self.global_head
        yield "global_head_inv", self.global_head_inv
        for stack, blocks in (("enc", self.enc_blocks), ("dec", self.dec_blocks)):
            for i, block in enumerate(blocks):
                for key in _BLOCK_KEYS:
                    yield f"{stack}{i}.{key}", block[key]

    def get_array(self, name: str) -> np.ndarray:
        for n, arr in self.named_arrays():
            if n == name:
                return arr
        raise KeyError(name)


def zero_grads(params: Params) -> dict:
    """Gradient accumulator matching ``named_arrays`` names and shapes."""
    return {name: np.zeros_like(arr) for name, arr in params.named_arrays()}


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_block(rng, d: int) -> dict:
    hidden = 4 * d
    return {
        "ln1_g": np.ones(d),
        "ln1_b": np.zeros(d),
        "wq": _uniform(rng, d, (d, d)),
        "wk": _uniform(rng, d, (d, d)),
        "wv": _uniform(rng, d, (d, d)),
        "wo": _uniform(rng, d, (d, d)),
        "ln2_g": np.ones(d),
        "ln2_b": np.zeros(d),
        "w1": _uniform(rng, d, (d, hidden)),
        "b1": np.zeros(hidden),
        "w2": _uniform(rng, hidden, (hidden, d)),
        "b2": np.zeros(d),
    }


def init_params(cfg: ModelConfig) -> Params:
    """Seeded initialization: uniform symmetric weights scaled 1/sqrt(fan_in).

    The unembedding bias starts at 0.5 so untrained reconstructions sit
    mid-range, away from the output clamp.  Inverse projection heads are
    the pseudo-inverses of their forward heads, which makes quantization
    idempotent at initialization.
    """
    rng = np.random.default_rng([cfg.seed, 0x70A2A])
    d = cfg.token_dim
    n0 = cfg.patch_total
    plen = cfg.patch_len

    embed_w = _uniform(rng, plen, (plen, d))
    positional = _uniform(rng, d, (n0, d))
    global_tokens = _uniform(rng, d, (cfg.num_global, d))
    mask_token = _uniform(rng, d, (d,))
    unembed_w = _uniform(rng, d, (d, plen))
    patch_head = _uniform(rng, d, (d, cfg.patch_code_dim))
    global_head = _uniform(rng, d, (d, cfg.global_code_dim))
    enc_blocks = [_init_block(rng, d) for _ in range(cfg.depth)]
    dec_blocks = [_init_block(rng, d) for _ in range(cfg.depth)]

    return Params(
        cfg=cfg,
        embed_w=embed_w,
        embed_b=np.zeros(d),
        positional=positional,
        global_tokens=global_tokens,
        mask_token=mask_token,
        unembed_w=unembed_w,
        unembed_b=np.full(plen, 0.5),
        patch_head=patch_head,
        patch_head_inv=np.linalg.pinv(patch_head),
        global_head=global_head,
        global_head_inv=np.linalg.pinv(global_head),
        enc_blocks=enc_blocks,
        dec_blocks=dec_blocks,
    )


# ---------------------------------------------------------------------------
# forward/backward primitives


def _gelu(u: np.ndarray) -> np.ndarray:
    return 0.5 * u * (1.0 + erf(u / math.sqrt(2.0)))


def _gelu_grad(u: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(u / math.sqrt(2.0))) + u * np.exp(-0.5 * u * u) / math.sqrt(
        2.0 * math.pi
    )


def _layernorm_forward(x, gamma, beta):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def _layernorm_backward(dout, cache):
    xhat, inv, gamma = cache
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


def _softmax_rows(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _block_forward(block, x):
    h, ln1_cache = _layernorm_forward(x, block["ln1_g"], block["ln1_b"])
    q = h @ block["wq"]
    k = h @ block["wk"]
    v = h @ block["wv"]
    scale = 1.0 / math.sqrt(x.shape[1])
    attn = _softmax_rows((q @ k.T) * scale)
    ctx = attn @ v
    x1 = x + ctx @ block["wo"]

    h2, ln2_cache = _layernorm_forward(x1, block["ln2_g"], block["ln2_b"])
    u = h2 @ block["w1"] + block["b1"]
    act = _gelu(u)
    x2 = x1 + act @ block["w2"] + block["b2"]

    cache = (h, q, k, v, attn, ctx, ln1_cache, h2, u, act, ln2_cache, scale)
    return x2, cache


def _block_backward(block, cache, dx2, prefix, grads):
    h, q, k, v, attn, ctx, ln1_cache, h2, u, act, ln2_cache, scale = cache

    # FFN half
    grads[f"{prefix}.b2"] += dx2.sum(axis=0)
    grads[f"{prefix}.w2"] += act.T @ dx2
    dact = dx2 @ block["w2"].T
    du = dact * _gelu_grad(u)
    grads[f"{prefix}.b1"] += du.sum(axis=0)
    grads[f"{prefix}.w1"] += h2.T @ du
    dh2 = du @ block["w1"].T
    dx1_ln, dg2, db2 = _layernorm_backward(dh2, ln2_cache)
    grads[f"{prefix}.ln2_g"] += dg2
    grads[f"{prefix}.ln2_b"] += db2
    dx1 = dx2 + dx1_ln

    # attention half
    grads[f"{prefix}.wo"] += ctx.T @ dx1
    dctx = dx1 @ block["wo"].T
    dattn = dctx @ v.T
    dv = attn.T @ dctx
    dlogits = attn * (dattn - (dattn * attn).sum(axis=1, keepdims=True))
    dq = (dlogits @ k) * scale
    dk = (dlogits.T @ q) * scale
    grads[f"{prefix}.wq"] += h.T @ dq
    grads[f"{prefix}.wk"] += h.T @ dk
    grads[f"{prefix}.wv"] += h.T @ dv
    dh = dq @ block["wq"].T + dk @ block["wk"].T + dv @ block["wv"].T
    dx_ln, dg1, db1 = _layernorm_backward(dh, ln1_cache)
    grads[f"{prefix}.ln1_g"] += dg1
    grads[f"{prefix}.ln1_b"] += db1
    return dx1 + dx_ln


def _stack_forward(blocks, x):
    caches = []
    for block in blocks:
        x, cache = _block_forward(block, x)
        caches.append(cache)
    return x, caches


def _stack_backward(blocks, stack_name, caches, dx, grads):
    for i in reversed(range(len(blocks))):
        dx = _block_backward(blocks[i], caches[i], dx, f"{stack_name}{i}", grads)
    return dx


# ---------------------------------------------------------------------------
# encoder


def _check_grid(params: Params, grid: PatchGrid) -> None:
    cfg = params.cfg
    if grid.layout.patch_len != cfg.patch_len or grid.layout.patch_total != cfg.patch_total:
        raise ConfigError(
            f"grid {grid.layout.patch_total}x{grid.layout.patch_len} does not "
            f"match model {cfg.patch_total}x{cfg.patch_len}"
        )


def encode_forward(params: Params, grid: PatchGrid):
    """Internal encoder pass returning (globals, patches, cache)."""
    _check_grid(params, grid)
    k = params.cfg.num_global
    x = grid.patches
    embedded = x @ params.embed_w + params.embed_b + params.positional
    seq0 = np.vstack([params.global_tokens, embedded])
    out, caches = _stack_forward(params.enc_blocks, seq0)
    return out[:k], out[k:], (x, caches)


def encode_backward(params: Params, cache, d_globals, d_patches, grads) -> None:
    """Accumulate encoder parameter gradients for given output gradients."""
    x, caches = cache
    k = params.cfg.num_global
    dy = np.vstack([d_globals, d_patches])
    dseq0 = _stack_backward(params.enc_blocks, "enc", caches, dy, grads)
    grads["global_tokens"] += dseq0[:k]
    de = dseq0[k:]
    grads["positional"] += de
    grads["embed_w"] += x.T @ de
    grads["embed_b"] += de.sum(axis=0)


def encode(params: Params, grid: PatchGrid) -> tuple[TokenSequence, TokenSequence]:
    """Encode a patch grid into (global tokens, patch tokens)."""
    g, p, _ = encode_forward(params, grid)
    globals_seq = TokenSequence(g, [("global", i) for i in range(g.shape[0])])
    patches_seq = TokenSequence(p, [("patch", i) for i in range(p.shape[0])])
    return globals_seq, patches_seq


# ---------------------------------------------------------------------------
# decoder input assembly


def build_decoder_input(q_aug: TokenSequence, params: Params, n_patches: int) -> TokenSequence:
    """Pad a (possibly short) token sequence out to the full slot grid.

    Patch tokens return to their original grid slots; global tokens fill
    the lowest-index unselected slots in order; every remaining slot gets
    a copy of the learned mask token.  Raises CapacityError when the
    sequence holds more tokens than there are slots.
    """
    if len(q_aug) > n_patches:
        raise CapacityError(
            f"{len(q_aug)} tokens cannot fit {n_patches} decoder slots"
        )
    d = params.cfg.token_dim
    if q_aug.tokens.shape[1] != d:
        raise ConfigError(
            f"token dimension {q_aug.tokens.shape[1]} != model {d}"
        )

    slots = np.tile(params.mask_token, (n_patches, 1))
    origin: list = [("mask", -1)] * n_patches

    taken = set()
    global_rows = []
    for row, tag in enumerate(q_aug.origin):
        kind, idx = tag
        if kind == "patch":
            if not 0 <= idx < n_patches:
                raise ConfigError(f"patch index {idx} outside slot grid")
            if idx in taken:
                raise ConfigError(f"duplicate patch index {idx}")
            slots[idx] = q_aug.tokens[row]
            origin[idx] = ("patch", idx)
            taken.add(idx)
        elif kind == "global":
            global_rows.append(row)
        else:
            raise ConfigError(f"unexpected origin kind {kind!r} in decoder input")

    free = [i for i in range(n_patches) if i not in taken]
    for ordinal, row in enumerate(global_rows):
        slot = free[ordinal]
        slots[slot] = q_aug.tokens[row]
        origin[slot] = ("global", ordinal)
    return TokenSequence(slots, origin)


def decoder_input_backward(
    s_seq: TokenSequence, q_aug: TokenSequence, d_slots: np.ndarray, grads: dict
) -> np.ndarray:
    """Route slot gradients back to the q_aug rows and the mask token."""
    d_q = np.zeros_like(q_aug.tokens)
    patch_row = {tag[1]: row for row, tag in enumerate(q_aug.origin) if tag[0] == "patch"}
    global_rows = [row for row, tag in enumerate(q_aug.origin) if tag[0] == "global"]
    for slot, tag in enumerate(s_seq.origin):
        kind, idx = tag
        if kind == "mask":
            grads["mask_token"] += d_slots[slot]
        elif kind == "patch":
            d_q[patch_row[idx]] += d_slots[slot]
        else:  # ("global", ordinal)
            d_q[global_rows[idx]] += d_slots[slot]
    return d_q


# ---------------------------------------------------------------------------
# decoder


def decode_forward(params: Params, s_seq: TokenSequence, layout: PatchLayout):
    """Internal decoder pass returning (image, cache)."""
    cfg = params.cfg
    n0 = layout.rows * layout.cols
    if len(s_seq) != n0:
        raise ConfigError(f"decoder input length {len(s_seq)} != slot count {n0}")
    if n0 != cfg.patch_total or layout.patch_len != cfg.patch_len:
        raise ConfigError("layout does not match model geometry")

    seq0 = s_seq.tokens + params.positional
    out, caches = _stack_forward(params.dec_blocks, seq0)
    patch_vecs = out @ params.unembed_w + params.unembed_b
    raw = reassemble_raw(layout, patch_vecs)
    data = np.clip(raw, 0.0, 1.0)
    image = Image(layout.height, layout.width, layout.channels, data)
    return image, (out, caches, raw, layout)


def decode_backward(params: Params, cache, d_image: np.ndarray, grads) -> np.ndarray:
    """Accumulate decoder gradients; returns the gradient w.r.t. slot tokens."""
    out, caches, raw, layout = cache
    inside = (raw > 0.0) & (raw < 1.0)
    d_raw = d_image * inside
    d_patch_vecs = imagegrid.reassemble_adjoint(layout, d_raw)
    grads["unembed_w"] += out.T @ d_patch_vecs
    grads["unembed_b"] += d_patch_vecs.sum(axis=0)
    d_out = d_patch_vecs @ params.unembed_w.T
    d_seq0 = _stack_backward(params.dec_blocks, "dec", caches, d_out, grads)
    grads["positional"] += d_seq0
    return d_seq0


def decode(params: Params, s_seq: TokenSequence, layout: PatchLayout) -> Image:
    """Decode a full slot sequence back into an image."""
    image, _ = decode_forward(params, s_seq, layout)
    return image
