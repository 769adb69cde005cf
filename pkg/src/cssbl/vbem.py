"""Variational Bayes EM for clustered, block-correlated sparse Bayesian learning.

The update operations act on a :class:`~cssbl.model.VbState` whose KCC axis
is in internal (block-contiguous) order, and on a fault-quality model whose
columns are in that same order. :func:`run` accepts user-order inputs and
does the permutation itself.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .exceptions import DimensionMismatch, NonFiniteLogit, NotPositiveDefinite
from .model import (CorrelationBlocks, Dataset, FaultQualityModel, Hyperpriors,
                    VbState, equicorrelation_interval, prior_weights)
from .numerics import (DEFAULT_CONFIG, NumericsConfig, cholesky_lower, digamma,
                       logsumexp, spd_inverse)

logger = logging.getLogger(__name__)

#: Lower clamp applied to every Gamma shape and rate.
POSITIVE_FLOOR = 1e-12
#: Margin kept between a re-estimated coefficient and the PD interval ends.
CORRELATION_MARGIN = 1e-6


@dataclass
class VbemConfig:
    """Settings of one inference run.

    Parameters
    ----------
    n_groups : int
        Number of sample groups ``G``.
    max_iter : int
        Iteration cap ``T``.
    tol : float
        Stop once the largest change of any posterior mean is below this.
    resp_floor : float
        Smallest responsibility a sample may give any group; must be < 1/G.
    init_seed : int
        Seed of the Dirichlet draw that initializes the responsibilities.
    estimate_correlation : bool
        Re-estimate the correlation coefficients in the M-step. When false
        the blocks stay at the identity they are initialized with.
    solver : {"auto", "woodbury", "dense"}
        How posterior covariances are formed. ``"woodbury"`` works in the
        M-dimensional measurement space and is chosen by ``"auto"`` when
        ``M < N``.
    """

    n_groups: int = 2
    max_iter: int = 500
    tol: float = 1e-6
    resp_floor: float = 1e-8
    init_seed: int = 0
    estimate_correlation: bool = True
    solver: str = "auto"
    numerics: NumericsConfig = field(default_factory=lambda: DEFAULT_CONFIG)

    def __post_init__(self):
        if int(self.n_groups) < 1:
            raise ValueError("n_groups must be >= 1")
        if int(self.max_iter) < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.n_groups > 1 and not 0 < self.resp_floor < 1.0 / self.n_groups:
            raise ValueError("resp_floor must lie in (0, 1/n_groups)")
        if self.solver not in ("auto", "woodbury", "dense"):
            raise ValueError(f"unknown solver {self.solver!r}")


@dataclass
class ConvergenceTrace:
    """Per-iteration diagnostics of a run."""

    delta: List[float] = field(default_factory=list)
    expected_alpha: List[float] = field(default_factory=list)
    group_mass: List[np.ndarray] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self):
        return len(self.delta)

    def record(self, delta, state):
        self.delta.append(float(delta))
        self.expected_alpha.append(float(state.expected_alpha))
        self.group_mass.append(state.resp.sum(axis=0))

    def to_dict(self):
        return {
            "delta": self.delta,
            "expected_alpha": self.expected_alpha,
            "group_mass": [m.tolist() for m in self.group_mass],
            "warnings": self.warnings,
            "converged": self.converged,
            "iterations": self.iterations,
        }


def _check_dims(model, data, structure):
    if model.M != data.M:
        raise DimensionMismatch(f"phi has {model.M} rows but samples have length {data.M}")
    if model.N != structure.n_kcc:
        raise DimensionMismatch(f"phi has {model.N} columns but the block structure covers {structure.n_kcc}")


def floor_responsibilities(resp, floor):
    """Raise entries below ``floor`` to it and rescale the rest so rows sum to 1."""
    resp = np.array(resp, dtype=float)
    if resp.shape[1] == 1:
        return np.ones_like(resp)
    low = resp < floor
    if not low.any():
        return resp / resp.sum(axis=1, keepdims=True)
    for _ in range(resp.shape[1]):
        rest = np.where(low, 0.0, resp).sum(axis=1, keepdims=True)
        budget = 1.0 - floor * low.sum(axis=1, keepdims=True)
        resp = np.where(low, floor, resp * budget / rest)
        new_low = resp < floor
        if not (new_low & ~low).any():
            break
        low |= new_low
    return resp


def responsibilities_from_logits(xi, floor=0.0):
    """Row-wise softmax of the group logits followed by flooring."""
    xi = np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(xi)):
        bad = np.argwhere(~np.isfinite(xi))
        raise NonFiniteLogit(f"non-finite group logits at (sample, group) {bad[:5].tolist()}")
    resp = np.exp(xi - logsumexp(xi, axis=1)[:, None])
    return floor_responsibilities(resp, floor) if floor > 0 else resp / resp.sum(axis=1, keepdims=True)


def initialize(model, data, structure, hyper, cfg):
    """Starting state: identity blocks, unit expected precisions, random responsibilities.

    ``model`` must already be in internal column order.
    """
    _check_dims(model, data, structure)
    K, G, R = data.K, int(cfg.n_groups), structure.n_blocks
    rng = np.random.Generator(np.random.Philox(int(cfg.init_seed) & 0xFFFFFFFFFFFFFFFF))
    if G == 1:
        resp = np.ones((K, 1))
    else:
        resp = floor_responsibilities(rng.dirichlet(np.ones(G), size=K), cfg.resp_floor)
    N = structure.n_kcc
    state = VbState(
        mu=np.zeros((K, N)),
        sigma=np.broadcast_to(np.eye(N), (K, N, N)).copy(),
        gamma_a=np.ones((G, R)),
        gamma_b=np.ones((G, R)),
        resp=resp,
        alpha_a=1.0,
        alpha_b=1.0,
        corr=CorrelationBlocks.identity(structure),
    )
    return update_posteriors(state, model, data, cfg)


def update_posteriors(state, model, data, cfg=None):
    """Posterior mean and covariance of every sample's KCCs.

    ``Sigma_k = (E[alpha] phi'phi + P_k)^-1`` and
    ``mu_k = E[alpha] Sigma_k phi' y_k`` where ``P_k`` is the block-diagonal
    prior precision of sample ``k``.
    """
    cfg = cfg or VbemConfig(n_groups=state.G)
    phi = model.phi
    Y = data.samples
    M, N = phi.shape
    alpha = state.expected_alpha
    structure = state.structure
    wn = prior_weights(state)[:, structure.block_of]
    solver = cfg.solver
    if solver == "auto":
        solver = "woodbury" if M < N else "dense"
    if solver == "woodbury" or alpha == 0.0:
        # Sigma = D - D phi' S^-1 phi D with D the prior covariance and
        # S = I/alpha + phi D phi' (M x M). With S = L L', V = L^-1 phi D
        # gives Sigma = D - V'V, which is exactly symmetric.
        cov = state.corr.covariance_full()
        DPt = (cov @ phi.T)[None, :, :] / wn[:, :, None]
        if alpha == 0.0:
            sigma = np.zeros((data.K, N, N))
            mu = np.zeros((data.K, N))
        else:
            S = phi @ DPt
            S[:, np.arange(M), np.arange(M)] += 1.0 / alpha
            L_inv = np.linalg.inv(cholesky_lower(S, cfg.numerics))
            V = L_inv @ np.swapaxes(DPt, -1, -2)
            sigma = np.swapaxes(V, -1, -2) @ V
            np.negative(sigma, out=sigma)
            mu = np.einsum("kmn,km->kn", V, np.einsum("kij,kj->ki", L_inv, Y))
        _add_prior_covariance(sigma, state.corr, wn)
        state.sigma = sigma
        state.mu = mu
        return state
    P = wn[:, :, None] * state.corr.precision_full()[None]
    A = alpha * (phi.T @ phi)[None] + P
    sigma = spd_inverse(A, cfg.numerics)
    sigma += np.swapaxes(sigma, -1, -2)
    sigma *= 0.5
    state.sigma = sigma
    state.mu = alpha * np.einsum("knm,km->kn", sigma, Y @ phi)
    return state


def _add_prior_covariance(sigma, corr, wn):
    """Add each sample's block-diagonal prior covariance to ``sigma`` in place."""
    structure = corr.structure
    for r in range(structure.n_correlated):
        s, e = structure.block_range(r)
        sigma[:, s:e, s:e] += corr.inverse_block(r)[None] / wn[:, s, None, None]
    tail = structure.offsets[structure.n_correlated]
    idx = np.arange(tail, structure.n_kcc)
    sigma[:, idx, idx] += 1.0 / wn[:, idx]


def block_quadratics(state):
    """``mu_kr' B_r mu_kr + Tr(B_r Sigma_kr)`` for every sample and block, ``(K, R)``."""
    B = state.corr.precision_full()
    per_kcc = np.einsum("kij,ij->ki", state.sigma, B) + (state.mu @ B) * state.mu
    return per_kcc @ state.structure.membership


def update_gamma(state, structure, hyper, quad=None):
    """Gamma posterior of each group's block precisions."""
    sizes = np.asarray(structure.sizes, dtype=float)
    mass = state.resp.sum(axis=0)
    if quad is None:
        quad = block_quadratics(state)
    a = 2.0 * hyper.a - 1.0 + mass[:, None] * sizes[None, :]
    b = 2.0 * hyper.b + state.resp.T @ quad
    state.gamma_a = np.maximum(a, POSITIVE_FLOOR)
    state.gamma_b = np.maximum(b, POSITIVE_FLOOR)
    return state


def group_logits(state, structure, quad=None):
    """Unnormalized log responsibilities ``xi``, shape ``(K, G)``."""
    sizes = np.asarray(structure.sizes, dtype=float)
    log_gamma = digamma(state.gamma_a) - np.log(state.gamma_b)
    prior_term = (log_gamma * sizes[None, :]).sum(axis=1)
    logdet = state.corr.logdet_precision().sum()
    if quad is None:
        quad = block_quadratics(state)
    return prior_term[None, :] + logdet - quad @ state.expected_gamma.T


def update_responsibilities(state, structure, floor=1e-8, quad=None):
    if state.G == 1:
        state.resp = np.ones((state.K, 1))
        return state
    state.resp = responsibilities_from_logits(group_logits(state, structure, quad), floor)
    return state


def update_alpha(state, model, data, hyper):
    """Gamma posterior of the noise precision."""
    phi = model.phi
    resid = data.samples - state.mu @ phi.T
    trace = np.einsum("kij,ij->", state.sigma, phi.T @ phi)
    state.alpha_a = hyper.c + 0.5 * data.K * data.M
    state.alpha_b = max(hyper.d + 0.5 * (float(np.sum(resid ** 2)) + float(trace)),
                        POSITIVE_FLOOR)
    return state


def project_equicorrelation(raw, margin=CORRELATION_MARGIN):
    """Nearest equicorrelation coefficient: mean off-diagonal over mean diagonal.

    The result is clamped inside the open PD interval by ``margin``.
    """
    raw = np.asarray(raw, dtype=float)
    d = raw.shape[0]
    theta0 = np.trace(raw) / d
    theta1 = (raw.sum() - np.trace(raw)) / (d * (d - 1))
    lo, hi = equicorrelation_interval(d)
    return float(np.clip(theta1 / theta0, lo + margin, hi - margin))


def raw_correlation_estimate(state, r):
    """Unstructured maximizer of the expected log prior for block ``r``."""
    s, e = state.structure.block_range(r)
    w = prior_weights(state)[:, r]
    mu = state.mu[:, s:e]
    second = state.sigma[:, s:e, s:e] + mu[:, :, None] * mu[:, None, :]
    return np.einsum("k,kij->ij", w, second) / state.resp.sum()


def update_correlation(state, structure, cfg=None):
    """M-step: re-estimate every correlated block's coefficient."""
    if cfg is not None and not cfg.estimate_correlation:
        return state
    coef = state.corr.coefficients.copy()
    for r in range(structure.n_correlated):
        coef[r] = project_equicorrelation(raw_correlation_estimate(state, r))
    state.corr = CorrelationBlocks(structure, coef)
    return state


def iterate(state, model, data, structure, hyper, cfg):
    """One sweep of coordinate updates; returns the largest posterior-mean change.

    The posterior means and covariances are already current on entry (from
    :func:`initialize` or the previous sweep), so the sweep starts at the
    precisions and ends by refreshing ``mu`` and ``Sigma``; the cyclic order
    mu/Sigma, gamma, z, alpha, B is unchanged.
    """
    previous = state.mu
    # mu, Sigma and B do not change between the two updates that need these.
    quad = block_quadratics(state)
    update_gamma(state, structure, hyper, quad)
    update_responsibilities(state, structure, cfg.resp_floor, quad)
    update_alpha(state, model, data, hyper)
    update_correlation(state, structure, cfg)
    update_posteriors(state, model, data, cfg)
    state.iteration += 1
    return float(np.max(np.abs(state.mu - previous)))


def run(model, data, structure, hyper=None, cfg=None, init_state=None):
    """Iterate to convergence.

    Parameters
    ----------
    model : FaultQualityModel
        Fault-pattern matrix in user column order.
    data : Dataset
    structure : BlockStructure
    hyper : Hyperpriors, optional
    cfg : VbemConfig, optional
    init_state : VbState, optional
        Warm start; copied, never mutated.

    Returns
    -------
    state : VbState
        Final posterior in internal order.
    trace : ConvergenceTrace
    """
    hyper = hyper or Hyperpriors()
    cfg = cfg or VbemConfig()
    _check_dims(model, data, structure)
    internal = model.permuted(structure)
    trace = ConvergenceTrace()
    if data.K < cfg.n_groups:
        msg = f"K={data.K} samples for G={cfg.n_groups} groups; some groups will be empty"
        logger.warning(msg)
        trace.warnings.append(msg)
    if init_state is None:
        state = initialize(internal, data, structure, hyper, cfg)
    else:
        state = init_state.copy()
    for t in range(1, int(cfg.max_iter) + 1):
        try:
            delta = iterate(state, internal, data, structure, hyper, cfg)
        except (NotPositiveDefinite, NonFiniteLogit) as exc:
            raise type(exc)(f"iteration {t}: {exc}") from exc
        trace.record(delta, state)
        if delta < cfg.tol:
            trace.converged = True
            break
    return state, trace


def estimate_variances(state, structure):
    """Per-group KCC variances ``1/E[gamma]``, shape ``(G, N)``, user order."""
    per_block = state.gamma_b / state.gamma_a
    return structure.to_user(per_block[:, structure.block_of], axis=1)


def posterior_variances(state, structure):
    """Diagonals of every ``Sigma_k``, shape ``(K, N)``, user order."""
    diag = np.diagonal(state.sigma, axis1=1, axis2=2)
    return structure.to_user(diag, axis=1)


def infer_samples(fitted, model, data, cfg, max_iter=100):
    """Posteriors and responsibilities for new samples under fitted precisions.

    The Gamma posteriors, noise precision and correlation blocks of
    ``fitted`` are held fixed; only ``mu``, ``Sigma`` and the responsibilities
    are alternated until the responsibilities stop changing. ``model`` is in
    internal column order.
    """
    K, G = data.K, fitted.G
    state = VbState(
        mu=np.zeros((K, model.N)),
        sigma=np.zeros((K, model.N, model.N)),
        gamma_a=fitted.gamma_a.copy(), gamma_b=fitted.gamma_b.copy(),
        resp=np.full((K, G), 1.0 / G),
        alpha_a=fitted.alpha_a, alpha_b=fitted.alpha_b,
        corr=fitted.corr.copy(),
    )
    update_posteriors(state, model, data, cfg)
    for _ in range(max_iter):
        previous = state.resp
        update_responsibilities(state, state.structure, cfg.resp_floor)
        update_posteriors(state, model, data, cfg)
        state.iteration += 1
        if np.max(np.abs(state.resp - previous)) < cfg.tol:
            break
    return state
