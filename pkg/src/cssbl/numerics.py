"""Dense linear-algebra and special-function kernels.

Every routine accepts a single matrix of shape ``(n, n)`` or a stack of
matrices of shape ``(..., n, n)``; stacked inputs are processed without a
Python loop unless the jitter ladder has to be climbed for some members.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from .exceptions import DomainError, EmptyInput, NotPositiveDefinite


@dataclass(frozen=True)
class NumericsConfig:
    """Tolerances used by the kernels in this module.

    Attributes
    ----------
    symmetry_tol : float
        Largest tolerated ``|m - m.T|`` entry, relative to ``max|m|``.
    jitter_ladder : tuple of float
        Diagonal loads tried in order when a Cholesky factorization fails,
        relative to the mean absolute diagonal entry.
    digamma_shift : float
        The recurrence moves arguments above this value before the
        asymptotic series is applied.
    """

    symmetry_tol: float = 1e-10
    jitter_ladder: tuple = (0.0, 1e-12, 1e-10, 1e-8)
    digamma_shift: float = 10.0


DEFAULT_CONFIG = NumericsConfig()

# Bernoulli terms B_2n / (2n) of the digamma asymptotic expansion, n = 1..7.
_DIGAMMA_SERIES = np.array([
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
])


def symmetrize(m):
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def _check_square(m):
    if m.ndim < 2 or m.shape[-1] != m.shape[-2] or m.shape[-1] < 1:
        raise DomainError(f"expected square matrices, got shape {m.shape}")


def _check_symmetric(m, tol):
    scale = max(float(np.max(np.abs(m))), 1.0) if m.size else 1.0
    asym = float(np.max(np.abs(m - np.swapaxes(m, -1, -2))))
    if asym > tol * scale:
        raise NotPositiveDefinite(
            f"matrix is not symmetric (max asymmetry {asym:.3e})")


def _cholesky_with_jitter(m, ladder):
    n = m.shape[-1]
    scale = float(np.mean(np.abs(np.diagonal(m))))
    if not np.isfinite(scale):
        raise NotPositiveDefinite("matrix has non-finite entries")
    eye = np.eye(n)
    for load in ladder:
        try:
            return np.linalg.cholesky(m + (load * scale) * eye)
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefinite(
        f"Cholesky failed after jitter up to {ladder[-1]:g} x mean diagonal")


def cholesky_lower(m, config=None):
    """Lower Cholesky factor ``L`` with ``L @ L.T == m``.

    The input is symmetrized first. If the plain factorization fails, a
    diagonal load from ``config.jitter_ladder`` is added, escalating until
    one succeeds; :class:`NotPositiveDefinite` is raised when none does.
    """
    cfg = config or DEFAULT_CONFIG
    m = np.asarray(m, dtype=float)
    _check_square(m)
    _check_symmetric(m, cfg.symmetry_tol)
    m = symmetrize(m)
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        pass
    if m.ndim == 2:
        return _cholesky_with_jitter(m, cfg.jitter_ladder)
    flat = m.reshape(-1, *m.shape[-2:])
    out = np.empty_like(flat)
    for i, block in enumerate(flat):
        out[i] = _cholesky_with_jitter(block, cfg.jitter_ladder)
    return out.reshape(m.shape)


def solve_spd(m, rhs, config=None):
    """Solve ``m @ X = rhs`` for symmetric positive definite ``m``.

    ``rhs`` may be a vector or a matrix (stacked alongside ``m`` when ``m``
    is a stack).
    """
    m = np.asarray(m, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    L = cholesky_lower(m, config)
    if m.ndim == 2:
        return cho_solve((L, True), rhs)
    vector_rhs = rhs.ndim == m.ndim - 1
    if vector_rhs:
        rhs = rhs[..., None]
    L_inv = np.linalg.inv(L)
    out = np.swapaxes(L_inv, -1, -2) @ (L_inv @ rhs)
    return out[..., 0] if vector_rhs else out


def spd_inverse(m, config=None):
    """Explicit inverse of an SPD matrix (or stack) via its Cholesky factor."""
    L_inv = np.linalg.inv(cholesky_lower(m, config))
    return np.swapaxes(L_inv, -1, -2) @ L_inv


def logdet_spd(m, config=None):
    L = cholesky_lower(m, config)
    return 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)


def digamma(x, config=None):
    """Digamma function for strictly positive arguments.

    Small arguments are shifted up with ``psi(x) = psi(x + 1) - 1/x`` and the
    asymptotic Bernoulli series is evaluated at the shifted point. Accurate to
    about 1e-14 absolute for moderate ``x``.
    """
    cfg = config or DEFAULT_CONFIG
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise DomainError("digamma is only defined here for x > 0")
    z = x.copy()
    acc = np.zeros_like(z)
    small = z < cfg.digamma_shift
    while np.any(small):
        acc[small] -= 1.0 / z[small]
        z[small] += 1.0
        small = z < cfg.digamma_shift
    inv2 = 1.0 / (z * z)
    series = np.zeros_like(z)
    for coef in _DIGAMMA_SERIES[::-1]:
        series = (series + coef) * inv2
    out = acc + np.log(z) - 0.5 / z - series
    return out if out.ndim else float(out)


def logsumexp(v, axis=None):
    """``log(sum(exp(v)))`` with max-subtraction; reduces ``axis``."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise EmptyInput("logsumexp of an empty input")
    vmax = np.max(v, axis=axis, keepdims=True)
    vmax = np.where(np.isfinite(vmax), vmax, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - vmax), axis=axis, keepdims=True)) + vmax
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)
