"""Domain types: block structure, correlation blocks, data, and VB state.

KCC columns are kept in two orders. *User order* is the numbering of the
caller (columns of the fault-pattern matrix as supplied). *Internal order*
places the correlated lists first, in declaration order, followed by the
independent KCCs; every block is then a contiguous slice. ``BlockStructure``
carries the permutation between the two.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import (DimensionMismatch, IndexOutOfRange,
                         NotPositiveDefinite)


def equicorrelation_interval(d):
    """Open interval of ``k`` for which the ``d x d`` equicorrelation matrix is PD."""
    if d < 2:
        return (-np.inf, np.inf)
    return (-1.0 / (d - 1), 1.0)


def equicorrelation(d, k):
    """Unit-diagonal ``d x d`` matrix with every off-diagonal entry ``k``."""
    m = np.full((d, d), float(k))
    np.fill_diagonal(m, 1.0)
    return m


def equicorrelation_inverse(d, k):
    """Closed-form inverse of :func:`equicorrelation`."""
    if d == 1:
        return np.ones((1, 1))
    lo, hi = equicorrelation_interval(d)
    if not lo < k < hi:
        raise NotPositiveDefinite(
            f"k={k} outside the PD interval ({lo:g}, {hi:g}) for d={d}")
    c = k / (1.0 + (d - 1) * k)
    m = np.full((d, d), -c)
    m[np.diag_indices(d)] += 1.0
    return m / (1.0 - k)


def equicorrelation_logdet(d, k):
    """``log det`` of the equicorrelation matrix, ``(1+(d-1)k)(1-k)^(d-1)``."""
    if d == 1:
        return 0.0
    return float(np.log1p((d - 1) * k) + (d - 1) * np.log1p(-k))


@dataclass(frozen=True)
class BlockStructure:
    """Partition of the N KCCs into correlated lists and independent KCCs.

    Parameters
    ----------
    sizes : sequence of int
        Block sizes in internal order. Correlated blocks come first.
    correlated : sequence of bool
        Whether each block is a correlated list.
    kcc_order : sequence of int, optional
        ``kcc_order[j]`` is the user-order column placed at internal
        position ``j``. Defaults to the identity.
    """

    sizes: tuple
    correlated: tuple
    kcc_order: Optional[tuple] = None

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        correlated = tuple(bool(c) for c in self.correlated)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "correlated", correlated)
        if len(sizes) != len(correlated) or not sizes:
            raise DimensionMismatch("sizes and correlated flags must align and be nonempty")
        for s, c in zip(sizes, correlated):
            if c and s < 2:
                raise DimensionMismatch("a correlated block needs at least 2 KCCs")
            if not c and s != 1:
                raise DimensionMismatch("an independent block holds exactly 1 KCC")
        r = sum(correlated)
        if any(correlated[r:]):
            raise DimensionMismatch("correlated blocks must precede independent ones")
        n = sum(sizes)
        if self.kcc_order is None:
            object.__setattr__(self, "kcc_order", tuple(range(n)))
        else:
            order = tuple(int(i) for i in self.kcc_order)
            if sorted(order) != list(range(n)):
                raise DimensionMismatch("kcc_order must be a permutation of 0..N-1")
            object.__setattr__(self, "kcc_order", order)

    @classmethod
    def from_lists(cls, n_kcc, correlated_lists=()):
        """Build a structure from lists of user-order KCC indices (0-based).

        KCCs not mentioned in any list become independent blocks.
        """
        seen = set()
        order = []
        for group in correlated_lists:
            for i in group:
                i = int(i)
                if not 0 <= i < n_kcc or i in seen:
                    raise DimensionMismatch(
                        f"KCC index {i} out of range or listed twice")
                seen.add(i)
                order.append(i)
        rest = [i for i in range(n_kcc) if i not in seen]
        sizes = [len(g) for g in correlated_lists] + [1] * len(rest)
        flags = [True] * len(correlated_lists) + [False] * len(rest)
        return cls(tuple(sizes), tuple(flags), tuple(order + rest))

    @classmethod
    def independent(cls, n_kcc):
        return cls((1,) * n_kcc, (False,) * n_kcc)

    @property
    def n_blocks(self):
        return len(self.sizes)

    @property
    def n_correlated(self):
        return sum(self.correlated)

    @property
    def n_kcc(self):
        return sum(self.sizes)

    @cached_property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)

    @cached_property
    def _ranges(self):
        off = self.offsets.tolist()
        return [(off[r], off[r + 1]) for r in range(self.n_blocks)]

    def block_range(self, r):
        if not 0 <= r < self.n_blocks:
            raise IndexOutOfRange(f"block {r} not in 0..{self.n_blocks - 1}")
        return self._ranges[r]

    @cached_property
    def block_of(self):
        """Block index of every internal KCC position, shape ``(N,)``."""
        return np.repeat(np.arange(self.n_blocks), self.sizes)

    @cached_property
    def membership(self):
        """``(N, R)`` 0/1 matrix mapping KCC positions to blocks."""
        m = np.zeros((self.n_kcc, self.n_blocks))
        m[np.arange(self.n_kcc), self.block_of] = 1.0
        return m

    @property
    def is_identity_order(self):
        return self.kcc_order == tuple(range(self.n_kcc))

    def to_internal(self, a, axis=-1):
        """Reorder a user-order KCC axis into internal order."""
        return np.take(np.asarray(a), self.kcc_order, axis=axis)

    @cached_property
    def _inverse_order(self):
        return np.argsort(self.kcc_order)

    def to_user(self, a, axis=-1):
        """Inverse of :meth:`to_internal`."""
        return np.take(np.asarray(a), self._inverse_order, axis=axis)

    def user_blocks(self):
        """User-order KCC indices of each block."""
        off = self.offsets
        return [list(self.kcc_order[off[r]:off[r + 1]]) for r in range(self.n_blocks)]


@dataclass
class CorrelationBlocks:
    """Equicorrelation matrices ``B_i^{-1}``, one coefficient per block.

    Independent blocks always carry coefficient 0 (``B^{-1} = [1]``). The
    coefficient array is read-only; build a new instance to change it.
    """

    structure: BlockStructure
    coefficients: np.ndarray = None

    def __post_init__(self):
        R = self.structure.n_blocks
        if self.coefficients is None:
            self.coefficients = np.zeros(R)
        self.coefficients = np.array(self.coefficients, dtype=float)
        self.coefficients.setflags(write=False)
        if self.coefficients.shape != (R,):
            raise DimensionMismatch(f"expected {R} coefficients")
        for r, (d, corr) in enumerate(zip(self.structure.sizes, self.structure.correlated)):
            k = self.coefficients[r]
            if not corr:
                if k != 0.0:
                    raise DimensionMismatch("independent blocks must have coefficient 0")
                continue
            lo, hi = equicorrelation_interval(d)
            if not lo < k < hi:
                raise NotPositiveDefinite(
                    f"block {r}: k={k} outside ({lo:g}, {hi:g})")

    @classmethod
    def identity(cls, structure):
        return cls(structure)

    @classmethod
    def uniform(cls, structure, k):
        coef = np.where(structure.correlated, float(k), 0.0)
        return cls(structure, coef)

    def inverse_block(self, r):
        """``B_r^{-1}``: the correlation matrix of block ``r``."""
        return equicorrelation(self.structure.sizes[r], self.coefficients[r])

    def precision_block(self, r):
        """``B_r``, via the equicorrelation closed form."""
        return equicorrelation_inverse(self.structure.sizes[r], self.coefficients[r])

    @cached_property
    def _logdet(self):
        out = np.array([-equicorrelation_logdet(d, k) for d, k in
                        zip(self.structure.sizes, self.coefficients)])
        out.setflags(write=False)
        return out

    def logdet_precision(self):
        """``ln det B_r`` for every block, shape ``(R,)``."""
        return self._logdet

    def _full(self, getter):
        N = self.structure.n_kcc
        out = np.zeros((N, N))
        r = self.structure.n_correlated
        for i in range(r):
            s, e = self.structure.block_range(i)
            out[s:e, s:e] = getter(i)
        tail = self.structure.offsets[r]
        idx = np.arange(tail, N)
        out[idx, idx] = 1.0
        out.setflags(write=False)
        return out

    @cached_property
    def _covariance_full(self):
        return self._full(self.inverse_block)

    @cached_property
    def _precision_full(self):
        return self._full(self.precision_block)

    def covariance_full(self):
        """``bdiag(B_1^{-1}, ..., B_R^{-1})`` in internal order (read-only)."""
        return self._covariance_full

    def precision_full(self):
        """``bdiag(B_1, ..., B_R)`` in internal order (read-only)."""
        return self._precision_full

    def copy(self):
        return CorrelationBlocks(self.structure, self.coefficients.copy())


@dataclass
class FaultQualityModel:
    """Fault-pattern matrix ``phi`` (M x N) mapping KCCs to KPCs."""

    phi: np.ndarray

    def __post_init__(self):
        self.phi = np.atleast_2d(np.asarray(self.phi, dtype=float))
        if self.phi.ndim != 2 or min(self.phi.shape) < 1:
            raise DimensionMismatch(f"phi must be a nonempty matrix, got {self.phi.shape}")
        if not np.all(np.isfinite(self.phi)):
            raise DimensionMismatch("phi contains non-finite entries")
        zero = np.flatnonzero(~np.any(self.phi != 0.0, axis=0))
        if zero.size:
            raise DimensionMismatch(
                f"phi has all-zero columns (unidentifiable KCCs): {zero.tolist()}")

    @property
    def M(self):
        return self.phi.shape[0]

    @property
    def N(self):
        return self.phi.shape[1]

    def permuted(self, structure):
        """Copy with columns in the structure's internal order."""
        return FaultQualityModel(structure.to_internal(self.phi, axis=1))

    @classmethod
    def load(cls, path):
        return cls(read_matrix(path))

    def save(self, path):
        write_matrix(path, self.phi)


@dataclass(frozen=True)
class Hyperpriors:
    """Gamma hyperparameters.

    ``a, b`` parameterize the prior on every block precision. ``c, d``
    parameterize the prior on the noise precision and default to ``a, b``.
    """

    a: float = 1e-4
    b: float = 1e-4
    c: Optional[float] = None
    d: Optional[float] = None

    def __post_init__(self):
        if self.c is None:
            object.__setattr__(self, "c", self.a)
        if self.d is None:
            object.__setattr__(self, "d", self.b)
        for name in ("a", "b", "c", "d"):
            if not getattr(self, name) > 0:
                raise ValueError(f"hyperparameter {name} must be > 0")


@dataclass
class Dataset:
    """KPC samples plus optional ground truth.

    ``samples`` has one row per KPC sample, shape ``(K, M)``. Ground truth,
    when present, is in user KCC order: ``x`` (K, N), ``labels`` (K,) with
    values in ``0..G-1``, and ``true_variances`` (G, N). ``origin`` records,
    for generated data, each sample's position before shuffling.
    """

    samples: np.ndarray
    x: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    true_variances: Optional[np.ndarray] = None
    origin: Optional[np.ndarray] = None

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if self.samples.ndim != 2 or self.samples.shape[0] < 1:
            raise DimensionMismatch("samples must be a (K, M) matrix with K >= 1")
        truth = [self.x, self.labels, self.true_variances]
        present = [t is not None for t in truth]
        if any(present) and not all(present):
            raise DimensionMismatch("ground-truth fields must be all present or all absent")
        if all(present):
            self.x = np.asarray(self.x, dtype=float)
            self.labels = np.asarray(self.labels, dtype=int)
            self.true_variances = np.atleast_2d(np.asarray(self.true_variances, dtype=float))
            if self.x.shape[0] != self.K or self.labels.shape != (self.K,):
                raise DimensionMismatch("ground truth must have one entry per sample")

    @property
    def K(self):
        return self.samples.shape[0]

    @property
    def M(self):
        return self.samples.shape[1]

    @property
    def Y(self):
        """Measurement matrix with one column per sample, shape ``(M, K)``."""
        return self.samples.T

    @property
    def has_truth(self):
        return self.x is not None

    @classmethod
    def load(cls, path):
        return cls(read_matrix(path).T)

    def save(self, path):
        write_matrix(path, self.Y)


def read_matrix(path):
    """Read the plain-text matrix format: a ``rows cols`` header, then rows."""
    lines = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or len(lines[0]) != 2:
        raise DimensionMismatch(f"{path}: first line must be '<rows> <cols>'")
    rows, cols = int(lines[0][0]), int(lines[0][1])
    body = lines[1:]
    if len(body) != rows or any(len(r) != cols for r in body):
        raise DimensionMismatch(f"{path}: expected {rows} rows of {cols} values")
    return np.array(body, dtype=float).reshape(rows, cols)


def write_matrix(path, matrix):
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    rows = [" ".join(repr(float(v)) for v in row) for row in matrix]
    Path(path).write_text(f"{matrix.shape[0]} {matrix.shape[1]}\n" + "\n".join(rows) + "\n")


@dataclass
class VbState:
    """Variational posterior, in internal KCC order.

    Attributes
    ----------
    mu : ndarray, shape (K, N)
        Posterior means of the KCCs of every sample.
    sigma : ndarray, shape (K, N, N)
        Posterior covariances.
    gamma_a, gamma_b : ndarray, shape (G, R)
        Shape and rate of the Gamma posterior of every block precision.
    resp : ndarray, shape (K, G)
        Group responsibilities.
    alpha_a, alpha_b : float
        Shape and rate of the Gamma posterior of the noise precision.
    corr : CorrelationBlocks
    iteration : int
    """

    mu: np.ndarray
    sigma: np.ndarray
    gamma_a: np.ndarray
    gamma_b: np.ndarray
    resp: np.ndarray
    alpha_a: float
    alpha_b: float
    corr: CorrelationBlocks
    iteration: int = 0

    @property
    def structure(self):
        return self.corr.structure

    @property
    def K(self):
        return self.resp.shape[0]

    @property
    def G(self):
        return self.resp.shape[1]

    @property
    def expected_gamma(self):
        return self.gamma_a / self.gamma_b

    @property
    def expected_alpha(self):
        return self.alpha_a / self.alpha_b

    def copy(self):
        return replace(
            self, mu=self.mu.copy(), sigma=self.sigma.copy(),
            gamma_a=self.gamma_a.copy(), gamma_b=self.gamma_b.copy(),
            resp=self.resp.copy(), corr=self.corr.copy())


def block_slice(state, k, r):
    """Posterior mean and covariance of block ``r`` of sample ``k``."""
    if not 0 <= k < state.K:
        raise IndexOutOfRange(f"sample {k} not in 0..{state.K - 1}")
    s, e = state.structure.block_range(r)
    return state.mu[k, s:e], state.sigma[k, s:e, s:e]


def prior_weights(state):
    """``sum_g E[gamma_{g,r}] E[z_{k,g}]`` for every sample and block, ``(K, R)``."""
    return state.resp @ state.expected_gamma


def assemble_prior_precision(state, k):
    """Block-diagonal prior precision of sample ``k``."""
    if not 0 <= k < state.K:
        raise IndexOutOfRange(f"sample {k} not in 0..{state.K - 1}")
    w = prior_weights(state)[k]
    N = state.structure.n_kcc
    out = np.zeros((N, N))
    for r in range(state.structure.n_blocks):
        s, e = state.structure.block_range(r)
        out[s:e, s:e] = w[r] * state.corr.precision_block(r)
    return out
