"""Scikit-learn compatible estimators wrapping the VBEM engine."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted

from .model import BlockStructure, Dataset, FaultQualityModel, Hyperpriors
from .vbem import VbemConfig, estimate_variances, infer_samples, run


class CSSBL(TransformerMixin, BaseEstimator):
    """Clustering, spatially correlated sparse Bayesian learning.

    Clusters KPC samples into groups that share a fault pattern and, for
    every group, estimates the variance of each KCC, treating each
    correlated list of KCCs as one block with an equicorrelation structure.

    Parameters
    ----------
    phi : array-like of shape (n_measurements, n_kcc)
        Fault-pattern matrix.
    correlated_lists : sequence of sequences of int, default=()
        Column indices of ``phi`` (0-based) forming each correlated list.
        Every other column is an independent KCC.
    n_groups : int, default=2
    max_iter : int, default=500
    tol : float, default=1e-6
        Convergence threshold on the largest change of a posterior mean.
    resp_floor : float, default=1e-8
    estimate_correlation : bool, default=True
    a, b : float, default=1e-4
        Gamma prior of the block precisions.
    c, d : float, optional
        Gamma prior of the noise precision; defaults to ``a, b``.
    solver : {"auto", "woodbury", "dense"}, default="auto"
    random_state : int, RandomState instance or None
        Seeds the random initial responsibilities.

    Attributes
    ----------
    variances_ : ndarray of shape (n_groups, n_kcc)
        Estimated KCC variances of every group; the fault scores.
    responsibilities_ : ndarray of shape (n_samples, n_groups)
    labels_ : ndarray of shape (n_samples,)
    means_ : ndarray of shape (n_samples, n_kcc)
        Posterior mean KCCs of the training samples.
    correlations_ : ndarray of shape (n_correlated_lists,)
        Estimated correlation coefficient of each list.
    noise_precision_ : float
    n_iter_ : int
    converged_ : bool
    state_ : VbState
        Full variational posterior (internal KCC order).
    trace_ : ConvergenceTrace
    structure_ : BlockStructure
    """

    def __init__(self, phi=None, correlated_lists=(), n_groups=2, max_iter=500,
                 tol=1e-6, resp_floor=1e-8, estimate_correlation=True,
                 a=1e-4, b=1e-4, c=None, d=None, solver="auto", random_state=None):
        self.phi = phi
        self.correlated_lists = correlated_lists
        self.n_groups = n_groups
        self.max_iter = max_iter
        self.tol = tol
        self.resp_floor = resp_floor
        self.estimate_correlation = estimate_correlation
        self.a = a
        self.b = b
        self.c = c
        self.d = d
        self.solver = solver
        self.random_state = random_state

    def _engine_params(self):
        return dict(n_groups=self.n_groups, correlated_lists=self.correlated_lists,
                    estimate_correlation=self.estimate_correlation)

    def _init_seed(self):
        if isinstance(self.random_state, (int, np.integer)):
            return int(self.random_state)
        return int(check_random_state(self.random_state).randint(0, 2**31 - 1))

    def _config(self, seed=0):
        p = self._engine_params()
        return VbemConfig(n_groups=p["n_groups"], max_iter=self.max_iter, tol=self.tol,
                          resp_floor=self.resp_floor, init_seed=seed,
                          estimate_correlation=p["estimate_correlation"],
                          solver=self.solver)

    def _check_samples(self, X, model):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != model.M:
            raise ValueError(f"X has {X.shape[1]} measurements; phi expects {model.M}")
        return X

    def fit(self, X, y=None):
        """Fit on KPC samples ``X`` of shape (n_samples, n_measurements)."""
        if self.phi is None:
            raise ValueError("phi (the fault-pattern matrix) is required")
        model = FaultQualityModel(check_array(self.phi, dtype=np.float64))
        X = self._check_samples(X, model)
        structure = BlockStructure.from_lists(model.N, self._engine_params()["correlated_lists"])
        hyper = Hyperpriors(self.a, self.b, self.c, self.d)
        state, trace = run(model, Dataset(X), structure, hyper, self._config(self._init_seed()))
        self.model_ = model
        self.structure_ = structure
        self.state_ = state
        self.trace_ = trace
        self.variances_ = estimate_variances(state, structure)
        self.responsibilities_ = state.resp.copy()
        self.labels_ = np.argmax(state.resp, axis=1)
        self.means_ = structure.to_user(state.mu, axis=1)
        self.correlations_ = np.array(state.corr.coefficients[:structure.n_correlated])
        self.noise_precision_ = float(state.expected_alpha)
        self.n_iter_ = trace.iterations
        self.converged_ = trace.converged
        self.n_features_in_ = model.M
        return self

    def _infer(self, X):
        check_is_fitted(self, "state_")
        X = self._check_samples(X, self.model_)
        return infer_samples(self.state_, self.model_.permuted(self.structure_),
                             Dataset(X), self._config())

    def predict_proba(self, X):
        """Group responsibilities of new samples under the fitted model."""
        return self._infer(X).resp

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def transform(self, X):
        """Posterior mean KCCs of new samples, shape (n_samples, n_kcc)."""
        return self.structure_.to_user(self._infer(X).mu, axis=1)

    def fault_scores(self):
        """Alias of ``variances_``: higher means more likely faulty."""
        check_is_fitted(self, "variances_")
        return self.variances_


class MSBL(CSSBL):
    """Stationary, uncorrelated baseline.

    A single group, every KCC its own block, and no correlation estimation:
    the shared-precision multiple-measurement-vector special case of
    :class:`CSSBL`.
    """

    def __init__(self, phi=None, max_iter=500, tol=1e-6, a=1e-4, b=1e-4,
                 c=None, d=None, solver="auto", random_state=None):
        self.phi = phi
        self.max_iter = max_iter
        self.tol = tol
        self.a = a
        self.b = b
        self.c = c
        self.d = d
        self.solver = solver
        self.random_state = random_state
        self.resp_floor = 1e-8

    def _engine_params(self):
        return dict(n_groups=1, correlated_lists=(), estimate_correlation=False)
