"""Kronecker-sum cost factorization and matrix-free kernel products.

The dense transport cost used on spectra is separable across a mixed-
radix split of the bin index: writing the flat bin i with digits
(i_1, ..., i_Q) for dims (f_1, ..., f_Q), the surrogate cost

    C[i, j] = sum_q ((i_q - j_q) * stride_q / F)^2

is a Kronecker sum of Q small tables, so its Gibbs kernel is a
Kronecker product of Q small kernels and kernel-vector products reduce
from F^2 to F * sum_q f_q multiply-adds via tensor mode products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapabilityError, FactorizationError
from .sinkhorn import build_cost_sq

MATERIALIZE_MAX_BINS = 1024


def _prime_factors(n: int) -> list:
    """Prime factorization by trial division, largest factors first."""
    factors = []
    d = 2
    while d * d <= n:
        while n % d == 0:
            factors.append(d)
            n //= d
        d += 1
    if n > 1:
        factors.append(n)
    return sorted(factors, reverse=True)


def factorize_bins(n_bins: int, n_factors: int):
    """Split F into n_factors integer dims with balanced sizes.

    Greedily assigns the prime factors of F (largest first) to the
    currently smallest group. Q = 1 returns (F,). Raises
    FactorizationError when F has fewer prime factors than requested
    groups (notably F prime with Q >= 2).
    """
    if n_bins < 1 or n_factors < 1:
        raise ValueError("n_bins and n_factors must be >= 1")
    if n_factors == 1:
        return (n_bins,)
    primes = _prime_factors(n_bins)
    if len(primes) < n_factors:
        raise FactorizationError(
            f"{n_bins} splits into only {len(primes)} prime factors; "
            f"cannot form {n_factors} dims >= 2"
        )
    groups = [1] * n_factors
    for p in primes:
        groups[int(np.argmin(groups))] *= p
    return tuple(sorted(groups, reverse=True))


def _strides(dims) -> np.ndarray:
    """Row-major strides: stride_q = prod of dims after q."""
    out = np.ones(len(dims), dtype=np.int64)
    for q in range(len(dims) - 2, -1, -1):
        out[q] = out[q + 1] * dims[q + 1]
    return out


@dataclass(frozen=True)
class KroneckerCost:
    """Small symmetric cost tables whose Kronecker sum is the full cost."""

    factors: tuple
    dims: tuple

    @property
    def n_bins(self) -> int:
        return int(np.prod(self.dims))


def kron_sum_cost(dims) -> KroneckerCost:
    """Cost tables C_q[i,j] = ((i-j) * stride_q / F)^2 per digit.

    Their Kronecker sum evaluated at flat indices equals the separable
    surrogate of the squared normalized bin distance; Q = 1 reproduces
    the dense cost exactly.
    """
    dims = tuple(int(d) for d in dims)
    if any(d < 1 for d in dims):
        raise ValueError("dims must be positive")
    if len(dims) > 1 and any(d < 2 for d in dims):
        raise ValueError("dims must all be >= 2 when Q >= 2")
    n_bins = int(np.prod(dims))
    strides = _strides(dims)
    factors = []
    for q, f in enumerate(dims):
        idx = np.arange(f, dtype=np.float64)
        diff = (idx[:, None] - idx[None, :]) * strides[q]
        factors.append((diff / n_bins) ** 2)
    return KroneckerCost(factors=tuple(factors), dims=dims)


def materialize_kron_sum(cost: KroneckerCost) -> np.ndarray:
    """Dense C[i,j] = sum_q C_q[i_q, j_q] (testing-scale only).

    Each summand broadcasts its table across the other digits (all-ones
    blocks in Kronecker position, not identities): that is the sum the
    entrywise exponential turns into a Kronecker product of kernels.
    """
    if cost.n_bins > MATERIALIZE_MAX_BINS:
        raise CapabilityError(
            f"refusing to materialize a {cost.n_bins}x{cost.n_bins} Kronecker sum"
        )
    total = np.zeros((cost.n_bins, cost.n_bins))
    for q, factor in enumerate(cost.factors):
        term = np.ones((1, 1))
        for r, f in enumerate(cost.dims):
            block = factor if r == q else np.ones((f, f))
            term = np.kron(term, block)
        total += term
    return total


def fold(vec: np.ndarray, dims) -> np.ndarray:
    """Reshape a length-F vector (or F x T matrix, columnwise) to dims."""
    vec = np.asarray(vec)
    n_bins = int(np.prod(dims))
    if vec.shape[0] != n_bins:
        raise ValueError(f"vector length {vec.shape[0]} does not match dims product {n_bins}")
    if vec.ndim == 1:
        return vec.reshape(dims)
    if vec.ndim == 2:
        return vec.reshape(tuple(dims) + (vec.shape[1],))
    raise ValueError("fold expects a vector or a matrix of columns")


def unfold(tensor: np.ndarray, dims) -> np.ndarray:
    """Inverse of fold."""
    n_bins = int(np.prod(dims))
    if tensor.ndim == len(dims):
        return tensor.reshape(n_bins)
    if tensor.ndim == len(dims) + 1:
        return tensor.reshape(n_bins, tensor.shape[-1])
    raise ValueError("tensor order does not match dims")


def _mode_apply(tensor: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    """Multiply mat into the given tensor mode."""
    moved = np.tensordot(mat, tensor, axes=([1], [axis]))
    return np.moveaxis(moved, 0, axis)


@dataclass(frozen=True)
class FactorizedKernel:
    """Gibbs kernel e^(-1) * (G_1 x ... x G_Q) held in factored form.

    ``kernels[q] = exp(-mu * C_q)``; the e^(-1) of the dense kernel
    exp(-mu*C - 1) is kept as a single global scale. Provides the
    matrix-free ``apply``/``apply_adjoint`` pair used by the scaling
    iteration; both accept (F,) vectors or (F, T) column batches.
    """

    kernels: tuple
    dims: tuple
    scale: float = float(np.exp(-1.0))

    @property
    def n_bins(self) -> int:
        return int(np.prod(self.dims))

    def _apply_factors(self, x: np.ndarray, transpose: bool) -> np.ndarray:
        folded = fold(x, self.dims)
        for q, g in enumerate(self.kernels):
            folded = _mode_apply(folded, g.T if transpose else g, q)
        return self.scale * unfold(folded, self.dims)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self._apply_factors(x, transpose=False)

    def apply_adjoint(self, x: np.ndarray) -> np.ndarray:
        return self._apply_factors(x, transpose=True)

    def apply_cost(self) -> int:
        """Multiply-adds per single-vector apply: F * sum_q f_q."""
        return int(self.n_bins * sum(self.dims))

    def materialize(self) -> np.ndarray:
        """Dense e^(-1) * (G_1 x ... x G_Q) (testing-scale only)."""
        if self.n_bins > MATERIALIZE_MAX_BINS:
            raise CapabilityError(
                f"refusing to materialize a {self.n_bins}x{self.n_bins} kernel"
            )
        dense = np.ones((1, 1))
        for g in self.kernels:
            dense = np.kron(dense, g)
        return self.scale * dense


def factorized_kernel(cost: KroneckerCost, mu: float) -> FactorizedKernel:
    """Per-factor kernels exp(-mu*C_q) with the global e^(-1) scale."""
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    kernels = tuple(np.exp(-mu * c) for c in cost.factors)
    return FactorizedKernel(kernels=kernels, dims=cost.dims)


def kron_kernel_apply(kernel: FactorizedKernel, vec: np.ndarray) -> np.ndarray:
    """Matrix-free (e^(-1) G_1 x ... x G_Q) @ vec."""
    return kernel.apply(vec)


def kron_row_marginal(u: np.ndarray, kernel: FactorizedKernel, v: np.ndarray) -> np.ndarray:
    """Row marginal u * (G v) of diag(u) G diag(v), plan never formed."""
    return u * kernel.apply(v)


def kron_col_marginal(u: np.ndarray, kernel: FactorizedKernel, v: np.ndarray) -> np.ndarray:
    """Column marginal v * (G' u) of diag(u) G diag(v)."""
    return v * kernel.apply_adjoint(u)
