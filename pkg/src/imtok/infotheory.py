"""Entropy, mutual-information, redundancy, and rate-distortion computations.

All quantities are in bits (base-2 logarithms).  The module mixes two
kinds of tools: cheap estimators used inside the tokenizer (the
conditional-entropy proxy, the Gaussian redundancy estimator) and exact
oracles used to verify identities numerically (``exact_mi`` over small
discrete joints).  The oracles are deliberately restricted to tiny
alphabets; they are for verification, not production estimation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ConfigError, DomainError, EstimationError

__all__ = [
    "LOG2_2PIE",
    "DiscreteJoint",
    "RateDistortionQuery",
    "gaussian_entropy",
    "rate_distortion",
    "code_rate",
    "conditional_entropy_proxy",
    "conditional_entropy_scores",
    "redundancy",
    "exact_mi",
    "apply_deterministic_map",
    "dual_threshold",
    "supplement_requirement",
    "shifted_distortion_floor",
    "gaussian_mutual_information",
]

LOG2_2PIE = math.log2(2.0 * math.pi * math.e)

# Alphabet-product ceiling for the exact discrete oracle; it enumerates
# the full joint table, so it must stay small.
_MAX_JOINT_CELLS = 4096

# Shrinkage added to every fitted covariance before taking determinants.
_SHRINKAGE = 1e-6

# A standardized coordinate whose conditional variance given the
# already-kept coordinates falls below this is treated as linearly
# determined and contributes no differential entropy.
_DEGENERACY_TOL = 1e-3


def gaussian_entropy(sigma2: float) -> float:
    """Differential entropy 0.5*log2(2*pi*e*sigma2) of a Gaussian scalar."""
    if sigma2 <= 0.0:
        raise DomainError(f"variance must be positive, got {sigma2}")
    return 0.5 * math.log2(2.0 * math.pi * math.e * sigma2)


@dataclass(frozen=True)
class RateDistortionQuery:
    """Gaussian-source rate query: pixel variance, distortion cap, pixel count."""

    sigma2: float
    d0: float
    pixel_count: int

    def __post_init__(self):
        if self.sigma2 <= 0.0:
            raise DomainError(f"sigma2 must be positive, got {self.sigma2}")
        if self.d0 <= 0.0:
            raise DomainError(f"d0 must be positive, got {self.d0}")
        if self.pixel_count < 1:
            raise DomainError(f"pixel_count must be >= 1, got {self.pixel_count}")


def rate_distortion(query: RateDistortionQuery) -> float:
    """Bits required to reconstruct an i.i.d. Gaussian source within MSE d0.

    max{h(X) - (n/2)*log2(2*pi*e*d0), 0} with h(X) = n * 0.5*log2(2*pi*e*sigma2),
    which simplifies to max{(n/2)*log2(sigma2/d0), 0}: zero bits once the
    allowed distortion reaches the source variance.
    """
    rate = 0.5 * query.pixel_count * math.log2(query.sigma2 / query.d0)
    return max(rate, 0.0)


def code_rate(n_tokens: int, codebook_size: int, height: int, width: int,
              channels: int) -> float:
    """Bits per pixel of a discrete representation: N*log2(K) / (H*W*C)."""
    if n_tokens < 1 or height < 1 or width < 1 or channels < 1:
        raise DomainError("counts must be positive")
    if codebook_size < 2:
        raise DomainError(f"codebook size must be >= 2, got {codebook_size}")
    return n_tokens * math.log2(codebook_size) / (height * width * channels)


def _project_onto_rows(tokens: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Least-squares projection of each row of ``tokens`` onto span(rows of basis)."""
    if basis.shape[0] == 0:
        return np.zeros_like(tokens)
    coef, *_ = np.linalg.lstsq(basis.T, tokens.T, rcond=None)
    return (basis.T @ coef).T


def conditional_entropy_proxy(patch_token: np.ndarray, globals_mat: np.ndarray,
                              raw_patch: np.ndarray) -> float:
    """Unique-information proxy for one patch token given the global tokens.

    The token is projected (orthogonal least squares) onto the row space
    of the global-token matrix; the squared residual norm is weighted by
    the raw patch's pixel variance plus 1e-12.  Zero residual or a
    constant patch therefore scores (near) zero.
    """
    patch_token = np.asarray(patch_token, dtype=np.float64)
    globals_mat = np.asarray(globals_mat, dtype=np.float64)
    raw_patch = np.asarray(raw_patch, dtype=np.float64)
    if patch_token.ndim != 1:
        raise ConfigError(f"patch token must be a vector, got shape {patch_token.shape}")
    if globals_mat.ndim != 2 or (
        globals_mat.shape[0] > 0 and globals_mat.shape[1] != patch_token.shape[0]
    ):
        raise ConfigError(
            f"global matrix shape {globals_mat.shape} incompatible with "
            f"token dimension {patch_token.shape[0]}"
        )
    resid = patch_token - _project_onto_rows(patch_token[None, :], globals_mat)[0]
    complexity = float(raw_patch.var()) + 1e-12
    return float(resid @ resid) * complexity


def conditional_entropy_scores(patch_tokens: np.ndarray, globals_mat: np.ndarray,
                               raw_patches: np.ndarray) -> np.ndarray:
    """Vectorized ``conditional_entropy_proxy`` over a full token matrix."""
    patch_tokens = np.asarray(patch_tokens, dtype=np.float64)
    globals_mat = np.asarray(globals_mat, dtype=np.float64)
    raw_patches = np.asarray(raw_patches, dtype=np.float64)
    if patch_tokens.ndim != 2 or raw_patches.ndim != 2:
        raise ConfigError("expected (M, D) tokens and (M, L) raw patches")
    if patch_tokens.shape[0] != raw_patches.shape[0]:
        raise ConfigError(
            f"{patch_tokens.shape[0]} tokens vs {raw_patches.shape[0]} raw patches"
        )
    if globals_mat.shape[0] > 0 and globals_mat.shape[1] != patch_tokens.shape[1]:
        raise ConfigError(
            f"global matrix shape {globals_mat.shape} incompatible with "
            f"token dimension {patch_tokens.shape[1]}"
        )
    resid = patch_tokens - _project_onto_rows(patch_tokens, globals_mat)
    complexity = raw_patches.var(axis=1) + 1e-12
    return np.einsum("ij,ij->i", resid, resid) * complexity


def _rank_aware_entropy(cov: np.ndarray) -> float:
    """Gaussian differential entropy of the non-degenerate coordinates.

    Coordinates are scanned in order; one whose conditional variance
    given the coordinates already kept falls below the degeneracy
    tolerance is treated as linearly determined and skipped, so a
    duplicated token adds no joint entropy.  The kept block gets
    shrinkage before the determinant.
    """
    d = cov.shape[0]
    kept: list[int] = []
    chol = np.zeros((0, 0))
    for j in range(d):
        if kept:
            cross = cov[kept, j]
            w = _solve_lower(chol, cross)
            cond_var = cov[j, j] + _SHRINKAGE - w @ w
        else:
            w = np.zeros(0)
            cond_var = cov[j, j] + _SHRINKAGE
        if cond_var <= _DEGENERACY_TOL:
            continue
        k = len(kept)
        grown = np.zeros((k + 1, k + 1))
        grown[:k, :k] = chol
        grown[k, :k] = w
        grown[k, k] = math.sqrt(cond_var)
        chol = grown
        kept.append(j)
    if not kept:
        return 0.0
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    if not np.isfinite(logdet):
        raise EstimationError("covariance still singular after shrinkage")
    return 0.5 * (len(kept) * LOG2_2PIE + logdet / math.log(2.0))


def _solve_lower(chol: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    return solve_triangular(chol, rhs, lower=True)


def redundancy(samples: np.ndarray) -> float:
    """Normalized entropy overlap of an n-token ensemble.

    (sum_i h(z_i) - h(z)) / sum_i h(z_i) under a Gaussian fit, from an
    (m, n, D) array of m joint samples.  Coordinates are standardized to
    unit variance first so every marginal entropy is positive, and the
    joint entropy is rank-aware: fully duplicated tokens drive the
    estimate to (n-1)/n instead of blowing up through a singular
    determinant.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 3:
        raise EstimationError(f"expected (m, n, D) samples, got shape {samples.shape}")
    m, n, dim = samples.shape
    if n < 2:
        raise EstimationError(f"need at least 2 tokens, got {n}")
    if m < n * dim:
        raise EstimationError(f"need at least n*D={n * dim} samples, got {m}")

    flat = samples.reshape(m, n * dim)
    sd = flat.std(axis=0)
    sd[sd < 1e-12] = 1.0
    z = (flat - flat.mean(axis=0)) / sd
    cov = np.cov(z, rowvar=False)

    marginal_sum = 0.0
    for i in range(n):
        block = cov[i * dim : (i + 1) * dim, i * dim : (i + 1) * dim]
        marginal_sum += _rank_aware_entropy(block)
    if marginal_sum <= 0.0:
        raise EstimationError("non-positive marginal entropy mass")
    joint = _rank_aware_entropy(cov)
    return (marginal_sum - joint) / marginal_sum


def gaussian_mutual_information(x: np.ndarray, y: np.ndarray) -> float:
    """Gaussian-fit mutual information between two vector variables, in bits."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[0] != y.shape[0]:
        raise EstimationError(f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    m = x.shape[0]
    dx, dy = x.shape[1], y.shape[1]
    if m < 2 * (dx + dy):
        raise EstimationError(f"need at least {2 * (dx + dy)} samples, got {m}")

    def _std(a):
        sd = a.std(axis=0)
        sd[sd < 1e-12] = 1.0
        return (a - a.mean(axis=0)) / sd

    xz, yz = _std(x), _std(y)
    joint = np.cov(np.hstack([xz, yz]), rowvar=False) + _SHRINKAGE * np.eye(dx + dy)

    def _logdet(c):
        sign, val = np.linalg.slogdet(c)
        if sign <= 0:
            raise EstimationError("covariance not positive definite")
        return val

    mi_nats = 0.5 * (
        _logdet(joint[:dx, :dx]) + _logdet(joint[dx:, dx:]) - _logdet(joint)
    )
    return max(mi_nats / math.log(2.0), 0.0)


@dataclass(frozen=True)
class DiscreteJoint:
    """Full joint probability table over a handful of discrete variables."""

    dims: tuple[int, ...]
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.shape != self.dims:
            raise DomainError(f"table shape {probs.shape} != dims {self.dims}")
        if int(np.prod(self.dims)) > _MAX_JOINT_CELLS:
            raise DomainError(
                f"joint table with {int(np.prod(self.dims))} cells exceeds the "
                f"oracle ceiling of {_MAX_JOINT_CELLS}"
            )
        if (probs < 0.0).any():
            raise DomainError("negative probability entry")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise DomainError(f"probabilities sum to {probs.sum()}, not 1")
        object.__setattr__(self, "probs", probs)

    @property
    def n_vars(self) -> int:
        return len(self.dims)


def _marginal_entropy(joint: DiscreteJoint, variables: tuple[int, ...]) -> float:
    """Shannon entropy (bits) of the marginal over ``variables``."""
    if not variables:
        return 0.0
    drop = tuple(v for v in range(joint.n_vars) if v not in variables)
    marg = joint.probs.sum(axis=drop) if drop else joint.probs
    p = marg.reshape(-1)
    nz = p[p > 0.0]
    return float(-(nz * np.log2(nz)).sum())


def exact_mi(joint: DiscreteJoint, group_a, group_b, cond=()) -> float:
    """Exact conditional mutual information I(A; B | cond) by enumeration.

    I(A;B|C) = H(A,C) + H(B,C) - H(A,B,C) - H(C), all Shannon entropies of
    marginals of the full table.  Groups must be pairwise disjoint.
    """
    a = tuple(sorted(set(group_a)))
    b = tuple(sorted(set(group_b)))
    c = tuple(sorted(set(cond)))
    for grp in (a, b, c):
        for v in grp:
            if not 0 <= v < joint.n_vars:
                raise DomainError(f"variable {v} outside joint with {joint.n_vars} vars")
    if set(a) & set(b) or set(a) & set(c) or set(b) & set(c):
        raise DomainError(f"groups must be disjoint: {a}, {b}, cond {c}")
    if not a or not b:
        raise DomainError("both variable groups must be nonempty")
    return (
        _marginal_entropy(joint, tuple(sorted(a + c)))
        + _marginal_entropy(joint, tuple(sorted(b + c)))
        - _marginal_entropy(joint, tuple(sorted(a + b + c)))
        - _marginal_entropy(joint, c)
    )


def apply_deterministic_map(joint: DiscreteJoint, var: int, mapping) -> DiscreteJoint:
    """Replace variable ``var`` with f(var) for a deterministic f.

    ``mapping[v]`` is the image of symbol v.  Probabilities of symbols
    with the same image are summed.  Used for data-processing-inequality
    checks: I(A; f(B)) <= I(A; B).
    """
    mapping = np.asarray(mapping, dtype=np.int64)
    if mapping.shape != (joint.dims[var],):
        raise DomainError(
            f"mapping length {mapping.shape} != alphabet {joint.dims[var]}"
        )
    if (mapping < 0).any():
        raise DomainError("mapping images must be nonnegative")
    new_size = int(mapping.max()) + 1
    new_dims = joint.dims[:var] + (new_size,) + joint.dims[var + 1 :]
    moved = np.moveaxis(joint.probs, var, 0)
    out = np.zeros((new_size,) + moved.shape[1:], dtype=np.float64)
    for sym in range(joint.dims[var]):
        out[mapping[sym]] += moved[sym]
    return DiscreteJoint(new_dims, np.moveaxis(out, 0, var))


def dual_threshold(h_total: float, epsilon: float, min_supplement: float) -> float:
    """Selection threshold max{T, (1 - epsilon) * H_total}.

    ``min_supplement`` is the information floor the selected tokens must
    supply on top of the globals; ``epsilon`` caps the fraction of total
    unique information allowed to be discarded.
    """
    if not 0.0 <= epsilon < 1.0:
        raise DomainError(f"epsilon {epsilon} outside [0, 1)")
    if h_total < 0.0:
        raise DomainError(f"total information {h_total} negative")
    if min_supplement < 0.0:
        raise DomainError(f"supplement floor {min_supplement} negative")
    return max(min_supplement, (1.0 - epsilon) * h_total)


def supplement_requirement(alpha: float, rd0: float) -> float:
    """Bits the selected tokens must add: (1 - alpha) * R(D0).

    ``alpha`` is the fraction of the reconstruction requirement already
    covered by the global tokens.
    """
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha {alpha} outside (0, 1)")
    if rd0 < 0.0:
        raise DomainError(f"rate requirement {rd0} negative")
    return (1.0 - alpha) * rd0


def shifted_distortion_floor(dmin: float, delta_bits: float) -> float:
    """Distortion floor after spending delta_bits extra rate: D * 2^(-2*delta).

    Base-2 is used consistently with bit-valued rates; halves exactly at
    delta_bits = 0.5 and is strictly decreasing in delta_bits.
    """
    if dmin <= 0.0:
        raise DomainError(f"distortion floor must be positive, got {dmin}")
    if delta_bits < 0.0:
        raise DomainError(f"rate gain must be nonnegative, got {delta_bits}")
    return dmin * 2.0 ** (-2.0 * delta_bits)
