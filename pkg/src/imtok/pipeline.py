"""End-to-end tokenize/de-tokenize orchestration, losses, and training.

The serialized token stream is the discrete artifact: quantized global
tokens plus the selected patch tokens with their grid positions,
sufficient to rebuild the decoder input (mask-padded) and reconstruct
the image.  Little-endian layout:

    magic   4s   "TTS1"
    u32          height, width, channels, patch_size
    f64          overlap_rate
    u32          num_global, selected_count, codebook_size, checksum
    u16 x k      global codebook indices
    (u16, u16)   selected (grid_position, codebook_index) pairs, sorted
                 by strictly increasing position
    f64          epsilon, threshold, h_total
    u8           flags: bit0 infeasible, bit1 capacity-clipped

Training runs plain gradient descent on
rec + lambda1 * commit + lambda2 * glob with a straight-through gradient
across quantization; selection is a stop-gradient decision recomputed
every step, and codebook entries learn by EMA rather than by gradient.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .checkpoint import model_checksum
from .errors import (
    ConfigError,
    DomainError,
    ModelMismatch,
    ParseError,
    TrainingDiverged,
)
from .imagegrid import Image, PatchGrid, partition
from .infotheory import code_rate
from .nanonet import (
    Params,
    TokenSequence,
    build_decoder_input,
    decode_backward,
    decode_forward,
    decoder_input_backward,
    encode_backward,
    encode_forward,
    init_params,
    zero_grads,
)
from .quantizer import Codebook, commit_loss, ema_update, init_codebooks, quantize
from .selection import SelectionConfig, SelectionResult, augment, run_selection

__all__ = [
    "TokenStream",
    "LossReport",
    "PinnedDecisions",
    "serialize_stream",
    "parse_stream",
    "tokenize",
    "detokenize",
    "glob_loss",
    "total_loss",
    "loss_and_grads",
    "train",
    "grad_check",
]

STREAM_MAGIC = b"TTS1"


@dataclass(frozen=True)
class TokenStream:
    """Serialized form of one tokenized image."""

    height: int
    width: int
    channels: int
    patch_size: int
    overlap_rate: float
    codebook_size: int
    checksum: int
    global_indices: tuple
    patch_entries: tuple  # ((grid_position, codebook_index), ...) ascending
    epsilon: float
    threshold: float
    h_total: float
    infeasible: bool = False
    capacity_clipped: bool = False

    def __post_init__(self):
        positions = [p for p, _ in self.patch_entries]
        if any(b <= a for a, b in zip(positions, positions[1:])):
            raise ParseError("grid positions must be strictly increasing")
        for _, idx in self.patch_entries:
            if not 0 <= idx < self.codebook_size:
                raise ParseError(f"codebook index {idx} out of range")
        for idx in self.global_indices:
            if not 0 <= idx < self.codebook_size:
                raise ParseError(f"codebook index {idx} out of range")

    @property
    def num_global(self) -> int:
        return len(self.global_indices)

    @property
    def selected_count(self) -> int:
        return len(self.patch_entries)

    def code_rate_selected(self) -> float:
        """Bits per pixel spent on the tokens actually in the stream."""
        n = self.num_global + self.selected_count
        if n == 0:
            return 0.0
        return code_rate(n, self.codebook_size, self.height, self.width, self.channels)

    def code_rate_padded(self) -> float:
        """Bits per pixel if every decoder slot were charged for."""
        from .imagegrid import patch_count

        rows, cols = patch_count(
            self.height, self.width, self.patch_size, self.overlap_rate
        )
        return code_rate(
            rows * cols + self.num_global, self.codebook_size,
            self.height, self.width, self.channels,
        )


def serialize_stream(stream: TokenStream) -> bytes:
    if stream.codebook_size > 0xFFFF + 1:
        raise DomainError("codebook too large for u16 stream indices")
    out = [STREAM_MAGIC]
    out.append(
        struct.pack(
            "<4I", stream.height, stream.width, stream.channels, stream.patch_size
        )
    )
    out.append(struct.pack("<d", stream.overlap_rate))
    out.append(
        struct.pack(
            "<4I",
            stream.num_global,
            stream.selected_count,
            stream.codebook_size,
            stream.checksum,
        )
    )
    out.append(struct.pack(f"<{stream.num_global}H", *stream.global_indices))
    for pos, idx in stream.patch_entries:
        out.append(struct.pack("<2H", pos, idx))
    out.append(
        struct.pack("<3d", stream.epsilon, stream.threshold, stream.h_total)
    )
    flags = int(stream.infeasible) | (int(stream.capacity_clipped) << 1)
    out.append(struct.pack("<B", flags))
    return b"".join(out)


def parse_stream(blob: bytes) -> TokenStream:
    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise ParseError("truncated token stream")
        chunk = blob[pos : pos + n]
        pos = pos + n
        return chunk

    pos = 0
    if take(4) != STREAM_MAGIC:
        raise ParseError("not a token stream (bad magic)")
    height, width, channels, patch_size = struct.unpack("<4I", take(16))
    (overlap_rate,) = struct.unpack("<d", take(8))
    num_global, selected, codebook_size, checksum = struct.unpack("<4I", take(16))
    if codebook_size < 2 or codebook_size > 0xFFFF + 1:
        raise ParseError(f"implausible codebook size {codebook_size}")
    if num_global > 0xFFFF or selected > 0xFFFF:
        raise ParseError("implausible token counts")
    global_indices = struct.unpack(f"<{num_global}H", take(2 * num_global))
    entries = tuple(
        struct.unpack("<2H", take(4)) for _ in range(selected)
    )
    epsilon, threshold, h_total = struct.unpack("<3d", take(24))
    (flags,) = struct.unpack("<B", take(1))
    if flags > 3:
        raise ParseError(f"unknown flag bits {flags:#x}")
    if pos != len(blob):
        raise ParseError(f"{len(blob) - pos} trailing bytes in token stream")
    return TokenStream(
        height=height,
        width=width,
        channels=channels,
        patch_size=patch_size,
        overlap_rate=overlap_rate,
        codebook_size=codebook_size,
        checksum=checksum,
        global_indices=global_indices,
        patch_entries=entries,
        epsilon=epsilon,
        threshold=threshold,
        h_total=h_total,
        infeasible=bool(flags & 1),
        capacity_clipped=bool(flags & 2),
    )


@dataclass(frozen=True)
class LossReport:
    """The three loss terms and their weighted total."""

    rec: float
    commit: float
    glob: float
    lambda1: float = 1.0
    lambda2: float = 1.0
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(
            self, "total", self.rec + self.lambda1 * self.commit + self.lambda2 * self.glob
        )


def glob_loss(globals_mat: np.ndarray, target_feature: np.ndarray) -> float:
    """Squared distance between mean-pooled globals and the holistic target."""
    globals_mat = np.asarray(globals_mat, dtype=np.float64)
    if globals_mat.shape[0] == 0:
        warnings.warn("glob_loss with zero global tokens is identically 0")
        return 0.0
    resid = globals_mat.mean(axis=0) - np.asarray(target_feature, dtype=np.float64)
    return float(resid @ resid)


@dataclass
class PinnedDecisions:
    """Discrete decisions frozen at a base point for finite differences."""

    selection: SelectionResult
    quant_indices: np.ndarray
    quant_origin: list
    glob_target: np.ndarray


def _dequantize(indices, origin, params: Params, patch_cb: Codebook,
                global_cb: Codebook) -> np.ndarray:
    """Map codebook indices back to D-space through the inverse heads."""
    vectors = np.zeros((len(origin), params.cfg.token_dim))
    for row, tag in enumerate(origin):
        if tag[0] == "global":
            vectors[row] = global_cb.entries[indices[row]] @ params.global_head_inv
        elif tag[0] == "patch":
            vectors[row] = patch_cb.entries[indices[row]] @ params.patch_head_inv
        else:
            raise ConfigError(f"cannot dequantize origin kind {tag[0]!r}")
    return vectors


@dataclass
class ForwardState:
    """Everything one forward pass produced, for the backward pass."""

    grid: PatchGrid
    enc_cache: tuple
    globals_mat: np.ndarray
    patch_tokens: np.ndarray
    selection: SelectionResult
    z_aug: TokenSequence
    quant_indices: np.ndarray
    quant_vectors: np.ndarray
    s_seq: TokenSequence
    dec_cache: tuple
    recon: Image
    glob_target: np.ndarray
    report: LossReport


def _forward(
    img: Image,
    params: Params,
    patch_cb: Codebook,
    global_cb: Codebook,
    sel_cfg: SelectionConfig,
    lambda1: float,
    lambda2: float,
    mode: str,
    pinned: Optional[PinnedDecisions],
) -> ForwardState:
    cfg = params.cfg
    if (img.height, img.width, img.channels) != (
        cfg.image_height, cfg.image_width, cfg.channels,
    ):
        raise ConfigError(
            f"image {img.height}x{img.width}x{img.channels} does not match model "
            f"{cfg.image_height}x{cfg.image_width}x{cfg.channels}"
        )
    grid = partition(img, cfg.patch_size, cfg.overlap_rate)
    g, p, enc_cache = encode_forward(params, grid)

    if pinned is not None:
        result = pinned.selection
    else:
        result = run_selection(
            g, p, grid, sel_cfg, max_selected=cfg.patch_total - cfg.num_global
        )
    z_aug = augment(g, p, result)

    if len(z_aug) == 0:
        quant_indices = np.zeros(0, dtype=np.int64)
        quant_vectors = np.zeros((0, cfg.token_dim))
    elif pinned is not None:
        quant_indices = pinned.quant_indices
        quant_vectors = _dequantize(
            quant_indices, pinned.quant_origin, params, patch_cb, global_cb
        )
    else:
        q = quantize(z_aug, patch_cb, global_cb, params)
        quant_indices, quant_vectors = q.indices, q.vectors

    if len(z_aug):
        diff = z_aug.tokens - quant_vectors
        commit = float(np.einsum("ij,ij->i", diff, diff).mean())
    else:
        commit = 0.0

    # decoder input: quantized values with a straight-through gradient in
    # training mode, raw continuous tokens in gradient-check mode
    s_rows = quant_vectors if mode == "ste" else z_aug.tokens
    s_seq = build_decoder_input(
        TokenSequence(s_rows.copy(), list(z_aug.origin)), params, cfg.patch_total
    )
    recon, dec_cache = decode_forward(params, s_seq, grid.layout)

    resid = recon.data - img.data
    rec = float((resid * resid).mean())

    glob_target = pinned.glob_target if pinned is not None else p.mean(axis=0)
    if cfg.num_global:
        gm = g.mean(axis=0)
        glob = float(((gm - glob_target) ** 2).sum())
    else:
        glob = 0.0

    report = LossReport(rec=rec, commit=commit, glob=glob,
                        lambda1=lambda1, lambda2=lambda2)
    return ForwardState(
        grid=grid, enc_cache=enc_cache, globals_mat=g, patch_tokens=p,
        selection=result, z_aug=z_aug, quant_indices=quant_indices,
        quant_vectors=quant_vectors, s_seq=s_seq, dec_cache=dec_cache,
        recon=recon, glob_target=glob_target, report=report,
    )


def _backward(
    img: Image,
    params: Params,
    patch_cb: Codebook,
    global_cb: Codebook,
    state: ForwardState,
    lambda1: float,
    lambda2: float,
) -> dict:
    cfg = params.cfg
    k = cfg.num_global
    grads = zero_grads(params)

    resid = state.recon.data - img.data
    d_image = 2.0 * resid / resid.size
    d_slots = decode_backward(params, state.dec_cache, d_image, grads)
    d_rows = decoder_input_backward(state.s_seq, state.z_aug, d_slots, grads)

    # straight-through (or direct, in continuous mode): slot gradients land
    # on the continuous tokens
    d_z_aug = d_rows.copy()

    # commitment term: gradient to the continuous side and to the inverse
    # heads through the (assignment-pinned) dequantized vectors
    if len(state.z_aug):
        n = len(state.z_aug)
        diff = state.z_aug.tokens - state.quant_vectors
        d_z_aug += lambda1 * 2.0 * diff / n
        d_qv = -lambda1 * 2.0 * diff / n
        for kind, head_inv_name, cb in (
            ("global", "global_head_inv", global_cb),
            ("patch", "patch_head_inv", patch_cb),
        ):
            rows = [i for i, tag in enumerate(state.z_aug.origin) if tag[0] == kind]
            if rows:
                entries = cb.entries[state.quant_indices[rows]]
                grads[head_inv_name] += entries.T @ d_qv[rows]

    d_g = d_z_aug[:k].copy() if k else np.zeros((0, cfg.token_dim))
    d_p = np.zeros_like(state.patch_tokens)
    for j, idx in enumerate(state.selection.selected_indices):
        d_p[idx] += d_z_aug[k + j]

    if k:
        gm = state.globals_mat.mean(axis=0)
        d_g += np.tile(lambda2 * 2.0 * (gm - state.glob_target) / k, (k, 1))

    encode_backward(params, state.enc_cache, d_g, d_p, grads)
    return grads


def loss_and_grads(
    img: Image,
    params: Params,
    patch_cb: Codebook,
    global_cb: Codebook,
    sel_cfg: SelectionConfig,
    lambda1: float = 1.0,
    lambda2: float = 1.0,
    mode: str = "ste",
    pinned: Optional[PinnedDecisions] = None,
    compute_grads: bool = True,
):
    """One full forward (and optional backward) pass on a single image."""
    if mode not in ("ste", "continuous"):
        raise ConfigError(f"unknown mode {mode!r}")
    state = _forward(
        img, params, patch_cb, global_cb, sel_cfg, lambda1, lambda2, mode, pinned
    )
    if not compute_grads:
        return state, None
    grads = _backward(img, params, patch_cb, global_cb, state, lambda1, lambda2)
    return state, grads


def total_loss(
    img: Image,
    state: ForwardState,
    lambda1: float = 1.0,
    lambda2: float = 1.0,
) -> LossReport:
    """Loss report for an existing forward state (components recomputed)."""
    resid = state.recon.data - img.data
    rec = float((resid * resid).mean())
    if len(state.z_aug):
        diff = state.z_aug.tokens - state.quant_vectors
        commit = float(np.einsum("ij,ij->i", diff, diff).mean())
    else:
        commit = 0.0
    glob = glob_loss(state.globals_mat, state.glob_target) if len(
        state.globals_mat
    ) else 0.0
    return LossReport(rec=rec, commit=commit, glob=glob,
                      lambda1=lambda1, lambda2=lambda2)


# ---------------------------------------------------------------------------
# tokenize / detokenize


def tokenize(
    img: Image,
    params: Params,
    patch_cb: Codebook,
    global_cb: Codebook,
    sel_cfg: SelectionConfig,
) -> TokenStream:
    """Partition, encode, select, quantize, and serialize one image."""
    cfg = params.cfg
    state = _forward(
        img, params, patch_cb, global_cb, sel_cfg, 1.0, 1.0, "ste", None
    )
    k = cfg.num_global
    global_indices = tuple(int(i) for i in state.quant_indices[:k])
    pairs = sorted(
        zip(
            (int(i) for i in state.selection.selected_indices),
            (int(i) for i in state.quant_indices[k:]),
        )
    )
    return TokenStream(
        height=img.height,
        width=img.width,
        channels=img.channels,
        patch_size=cfg.patch_size,
        overlap_rate=cfg.overlap_rate,
        codebook_size=cfg.codebook_size,
        checksum=model_checksum(params, patch_cb, global_cb),
        global_indices=global_indices,
        patch_entries=tuple(pairs),
        epsilon=sel_cfg.epsilon,
        threshold=state.selection.threshold,
        h_total=state.selection.h_total,
        infeasible=state.selection.infeasible,
        capacity_clipped=state.selection.capacity_clipped,
    )


def detokenize(
    stream: TokenStream,
    params: Params,
    patch_cb: Codebook,
    global_cb: Codebook,
) -> Image:
    """Rebuild the decoder input from a stream and decode the image."""
    cfg = params.cfg
    if stream.checksum != model_checksum(params, patch_cb, global_cb):
        raise ModelMismatch(
            f"stream checksum {stream.checksum:#010x} does not match the model"
        )
    if (stream.height, stream.width, stream.channels, stream.patch_size) != (
        cfg.image_height, cfg.image_width, cfg.channels, cfg.patch_size,
    ) or stream.overlap_rate != cfg.overlap_rate:
        raise ModelMismatch("stream geometry does not match the model")
    n0 = cfg.patch_total
    for pos, _ in stream.patch_entries:
        if pos >= n0:
            raise ParseError(f"grid position {pos} outside {n0}-slot grid")
    if stream.num_global != cfg.num_global:
        raise ModelMismatch("stream global-token count does not match the model")

    origin = [("global", i) for i in range(stream.num_global)] + [
        ("patch", pos) for pos, _ in stream.patch_entries
    ]
    indices = np.array(
        list(stream.global_indices) + [idx for _, idx in stream.patch_entries],
        dtype=np.int64,
    )
    rows = _dequantize(indices, origin, params, patch_cb, global_cb)
    s_seq = build_decoder_input(TokenSequence(rows, origin), params, n0)
    recon, _ = decode_forward(params, s_seq, cfg.layout())
    return recon


# ---------------------------------------------------------------------------
# training


def train(
    dataset,
    cfg,
    sel_cfg: Optional[SelectionConfig] = None,
    steps: int = 100,
    learning_rate: float = 1e-2,
    lambda1: float = 1.0,
    lambda2: float = 1.0,
    params: Optional[Params] = None,
    patch_cb: Optional[Codebook] = None,
    global_cb: Optional[Codebook] = None,
):
    """Plain gradient descent over the dataset, one image per step.

    Returns (params, patch_cb, global_cb, trace) where trace holds one
    LossReport per step.  Deterministic: images cycle in order and all
    initialization comes from cfg.seed.
    """
    if not dataset:
        raise DomainError("training dataset is empty")
    if params is None:
        params = init_params(cfg)
    if patch_cb is None or global_cb is None:
        patch_cb, global_cb = init_codebooks(cfg)
    if sel_cfg is None:
        sel_cfg = SelectionConfig(codebook_size=cfg.codebook_size)

    trace: list[LossReport] = []
    for step in range(steps):
        img = dataset[step % len(dataset)]
        if any(not np.isfinite(arr).all() for _, arr in params.named_arrays()):
            raise TrainingDiverged(f"non-finite parameters entering step {step}")
        try:
            state, grads = loss_and_grads(
                img, params, patch_cb, global_cb, sel_cfg, lambda1, lambda2,
                mode="ste",
            )
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise TrainingDiverged(f"forward pass failed at step {step}: {exc}") from exc
        if not np.isfinite(state.report.total):
            raise TrainingDiverged(f"loss became {state.report.total} at step {step}")
        trace.append(state.report)

        for name, arr in params.named_arrays():
            arr -= learning_rate * grads[name]

        # codebooks learn from the assignments made this step
        k = cfg.num_global
        if len(state.z_aug):
            if k:
                proj = state.z_aug.tokens[:k] @ params.global_head
                ema_update(global_cb, proj, state.quant_indices[:k])
            if len(state.z_aug) > k:
                proj = state.z_aug.tokens[k:] @ params.patch_head
                ema_update(patch_cb, proj, state.quant_indices[k:])
    return params, patch_cb, global_cb, trace


# ---------------------------------------------------------------------------
# gradient check


def grad_check(
    params: Params,
    patch_cb: Codebook,
    global_cb: Codebook,
    img: Image,
    sel_cfg: Optional[SelectionConfig] = None,
    step: float = 1e-5,
    lambda1: float = 1.0,
    lambda2: float = 1.0,
) -> dict:
    """Analytic-vs-central-difference comparison over every parameter.

    The discrete decisions (token selection, codebook assignments, the
    pooled glob target) are pinned at the base point so the compared
    function is smooth; the decoder consumes the continuous tokens
    directly, which exercises the full backward path minus the
    straight-through shortcut.  Returns per-parameter max relative
    errors and the overall worst offender.
    """
    if sel_cfg is None:
        sel_cfg = SelectionConfig(codebook_size=params.cfg.codebook_size)

    base, _ = loss_and_grads(
        img, params, patch_cb, global_cb, sel_cfg,
        lambda1, lambda2, mode="ste", compute_grads=False,
    )
    pinned = PinnedDecisions(
        selection=base.selection,
        quant_indices=base.quant_indices,
        quant_origin=list(base.z_aug.origin),
        glob_target=base.glob_target,
    )

    state, grads = loss_and_grads(
        img, params, patch_cb, global_cb, sel_cfg,
        lambda1, lambda2, mode="continuous", pinned=pinned,
    )

    def loss_at_current() -> float:
        s, _ = loss_and_grads(
            img, params, patch_cb, global_cb, sel_cfg,
            lambda1, lambda2, mode="continuous", pinned=pinned,
            compute_grads=False,
        )
        return s.report.total

    per_param = {}
    worst = 0.0
    worst_name = ""
    for name, arr in params.named_arrays():
        numeric = np.zeros_like(arr)
        for i in range(arr.size):
            saved = arr.flat[i]
            arr.flat[i] = saved + step
            up = loss_at_current()
            arr.flat[i] = saved - step
            down = loss_at_current()
            arr.flat[i] = saved
            numeric.flat[i] = (up - down) / (2.0 * step)
        analytic = grads[name]
        denom = np.maximum(1e-6, np.maximum(np.abs(analytic), np.abs(numeric)))
        rel = float((np.abs(analytic - numeric) / denom).max()) if arr.size else 0.0
        per_param[name] = rel
        if rel > worst:
            worst, worst_name = rel, name
    return {
        "max_rel_error": worst,
        "worst_param": worst_name,
        "per_param": per_param,
        "loss": state.report.total,
    }
