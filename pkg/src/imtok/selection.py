"""Entropy-ranked greedy token selection.

Patch tokens are scored by the conditional-entropy proxy (unique
information given the global tokens), sorted descending, and the
shortest prefix whose cumulative score reaches the dual threshold
max{T, (1 - epsilon) * H_total} is kept.  Greedy-by-descending is
provably optimal for minimum-cardinality sum-threshold selection, and
``brute_force_min_subset`` re-derives the same answer by exhaustive
enumeration as an independent check.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, OracleTooLarge
from .imagegrid import PatchGrid
from .infotheory import (
    RateDistortionQuery,
    conditional_entropy_scores,
    dual_threshold,
    gaussian_mutual_information,
    rate_distortion,
    supplement_requirement,
)

__all__ = [
    "SCORE_FLOOR",
    "EntropyScore",
    "SelectionConfig",
    "SelectionResult",
    "rank_tokens",
    "select_min_prefix",
    "brute_force_min_subset",
    "run_selection",
    "select_top_n",
    "augment",
    "calibrate_alpha",
]

# Proxy scores below this are treated as zero unique information during
# thresholding.  A genuinely flat patch scores ~1e-12 * ||residual||^2
# (the variance epsilon), orders of magnitude below any patch with one
# quantization step of real contrast, so a constant image selects N=0.
SCORE_FLOOR = 1e-9


@dataclass(frozen=True)
class EntropyScore:
    """Proxy score of one patch token, tagged with its grid index."""

    token_index: int
    score: float

    def __post_init__(self):
        if not np.isfinite(self.score) or self.score < 0.0:
            raise DomainError(f"score must be finite and >= 0, got {self.score}")


@dataclass(frozen=True)
class SelectionConfig:
    """Knobs of the selection stage.

    ``epsilon`` caps the fraction of unique information discarded.  The
    bit-valued supplement floor T is active only when ``d0``, ``sigma2``
    and ``pixel_count`` are all provided; otherwise the epsilon
    constraint alone governs (T = 0), matching the default operating
    mode.  ``alpha`` is the fraction of the reconstruction requirement
    attributed to global tokens.
    """

    epsilon: float = 0.05
    alpha: float = 0.3
    d0: Optional[float] = None
    sigma2: Optional[float] = None
    pixel_count: Optional[int] = None
    codebook_size: int = 4096
    budget: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise DomainError(f"epsilon {self.epsilon} outside [0, 1)")
        if not 0.0 < self.alpha < 1.0:
            raise DomainError(f"alpha {self.alpha} outside (0, 1)")
        if self.codebook_size < 2:
            raise DomainError("codebook_size must be >= 2")
        if self.budget is not None and self.budget < 0:
            raise DomainError("budget must be >= 0")

    @property
    def supplement_enabled(self) -> bool:
        return (
            self.d0 is not None
            and self.sigma2 is not None
            and self.pixel_count is not None
        )


@dataclass(frozen=True)
class SelectionResult:
    """Everything the selection stage decided, in ranked order."""

    scores: list  # EntropyScore per token, in original index order
    order: np.ndarray = field(repr=False)  # descending-score permutation
    cumulative: np.ndarray = field(repr=False)  # prefix sums along ``order``
    threshold: float
    h_total: float
    selected_count: int
    selected_indices: list  # original indices of the chosen prefix
    infeasible: bool = False
    capacity_clipped: bool = False
    requested_count: int = 0


def _score_values(scores) -> np.ndarray:
    vals = np.asarray(
        [s.score if isinstance(s, EntropyScore) else s for s in scores],
        dtype=np.float64,
    )
    if vals.size and ((vals < 0.0).any() or not np.isfinite(vals).all()):
        raise DomainError("scores must be finite and nonnegative")
    return vals


def rank_tokens(scores) -> np.ndarray:
    """Stable descending sort permutation; ties break by ascending index."""
    vals = _score_values(scores)
    return np.argsort(-vals, kind="stable")


def select_min_prefix(sorted_scores, tau: float) -> tuple[int, bool]:
    """Least k whose prefix sum reaches tau, over descending scores.

    Returns (k, infeasible).  tau = 0 selects nothing; if even the full
    sum falls short the count caps at M with the infeasible flag set,
    leaving the decision to the caller.
    """
    vals = _score_values(sorted_scores)
    if np.any(np.diff(vals) > 0.0):
        raise DomainError("scores must be sorted in descending order")
    if tau < 0.0:
        raise DomainError(f"threshold {tau} negative")
    if tau == 0.0:
        return 0, False
    cum = np.cumsum(vals)
    if cum.size == 0 or cum[-1] < tau:
        return int(vals.size), True
    return int(np.searchsorted(cum, tau, side="left")) + 1, False


def brute_force_min_subset(scores, tau: float) -> int:
    """Exhaustive minimal subset cardinality with sum >= tau (M <= 20).

    Verification oracle for the greedy prefix rule; enumerates all 2^M
    subsets, so it refuses anything beyond 20 scores.
    """
    vals = _score_values(scores)
    m = vals.size
    if m > 20:
        raise OracleTooLarge(f"{m} scores would need 2^{m} subsets")
    if tau <= 0.0:
        return 0
    masks = (np.arange(1 << m)[:, None] >> np.arange(m)) & 1
    sums = masks @ vals
    feasible = sums >= tau
    if not feasible.any():
        return m
    return int(masks.sum(axis=1)[feasible].min())


def select_top_n(scores, n: int) -> list:
    """Original indices of the n highest-scoring tokens (budgeted mode)."""
    if n < 0:
        raise DomainError(f"budget {n} negative")
    return [int(i) for i in rank_tokens(scores)[:n]]


def run_selection(
    globals_mat: np.ndarray,
    patch_tokens: np.ndarray,
    grid: PatchGrid,
    cfg: SelectionConfig,
    max_selected: Optional[int] = None,
) -> SelectionResult:
    """Score, rank, and select the minimal token prefix for one image.

    ``max_selected`` is the decoder capacity (slot count minus globals);
    a selection exceeding it is clipped to the top ``max_selected``
    tokens and flagged ``capacity_clipped`` rather than failing, since
    the unconstrained count is still reported in ``requested_count``.

    When ``cfg.budget`` is set the threshold machinery is bypassed and
    exactly that many top-ranked tokens are kept (capped at the token
    count and capacity); experiment protocols with fixed token counts
    use this mode.
    """
    globals_mat = np.asarray(globals_mat, dtype=np.float64)
    patch_tokens = np.asarray(patch_tokens, dtype=np.float64)
    raw = conditional_entropy_scores(patch_tokens, globals_mat, grid.patches)
    effective = np.where(raw >= SCORE_FLOOR, raw, 0.0)

    order = rank_tokens(effective)
    sorted_scores = effective[order]
    cumulative = np.cumsum(sorted_scores) if sorted_scores.size else np.zeros(0)
    h_total = float(cumulative[-1]) if cumulative.size else 0.0

    supplement = 0.0
    if cfg.supplement_enabled and h_total > 0.0:
        rd0 = rate_distortion(
            RateDistortionQuery(cfg.sigma2, cfg.d0, cfg.pixel_count)
        )
        budget_bits = (patch_tokens.shape[0] + globals_mat.shape[0]) * np.log2(
            cfg.codebook_size
        )
        # Bridge from bits to proxy units: scale the proxy mass by how
        # much of the full token budget the distortion target demands.
        supplement = supplement_requirement(cfg.alpha, h_total) * min(
            1.0, rd0 / budget_bits
        )

    tau = dual_threshold(h_total, cfg.epsilon, supplement)
    if cfg.budget is not None:
        requested = min(cfg.budget, sorted_scores.size)
        infeasible = False
    else:
        requested, infeasible = select_min_prefix(sorted_scores, tau)

    clipped = False
    count = requested
    if max_selected is not None and count > max_selected:
        count = max_selected
        clipped = True

    return SelectionResult(
        scores=[EntropyScore(i, float(effective[i])) for i in range(effective.size)],
        order=order,
        cumulative=cumulative,
        threshold=float(tau),
        h_total=h_total,
        selected_count=int(count),
        selected_indices=[int(i) for i in order[:count]],
        infeasible=infeasible,
        capacity_clipped=clipped,
        requested_count=int(requested),
    )


def augment(
    globals_mat: np.ndarray,
    patch_tokens: np.ndarray,
    result: SelectionResult,
):
    """Concatenate [globals; selected patch tokens] into one tagged sequence.

    Selected tokens appear in ranked (descending-score) order, each
    tagged with its original grid index.
    """
    from .nanonet import TokenSequence

    globals_mat = np.asarray(globals_mat, dtype=np.float64)
    patch_tokens = np.asarray(patch_tokens, dtype=np.float64)
    for idx in result.selected_indices:
        if not 0 <= idx < patch_tokens.shape[0]:
            raise DomainError(f"selected index {idx} outside token matrix")
    rows = np.vstack([globals_mat, patch_tokens[result.selected_indices]])
    origin = [("global", i) for i in range(globals_mat.shape[0])] + [
        ("patch", int(idx)) for idx in result.selected_indices
    ]
    return TokenSequence(rows, origin)


def calibrate_alpha(
    pooled_features: np.ndarray,
    pooled_globals: np.ndarray,
    query: RateDistortionQuery,
    lo: float = 0.05,
    hi: float = 0.95,
) -> float:
    """Estimate the global-token information share from a calibration batch.

    alpha_hat = clamp(I_gauss(pooled image feature; pooled globals) / R(D0)),
    clamped into [lo, hi] so the supplement floor stays well-defined.
    """
    rd0 = rate_distortion(query)
    if rd0 <= 0.0:
        return hi
    mi = gaussian_mutual_information(pooled_features, pooled_globals)
    return float(min(max(mi / rd0, lo), hi))
