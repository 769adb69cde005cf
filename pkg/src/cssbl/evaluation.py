"""Diagnosis quality: group matching, AUC, NMSE and multi-trial summaries."""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .exceptions import DegenerateLabels, EmptyInput, GroupCountMismatch, ZeroTruth

#: Largest group count matched by exhaustive search.
EXHAUSTIVE_MATCH_LIMIT = 6


@dataclass
class TrialResult:
    auc: float
    nmse: float
    matched_permutation: tuple
    converged: bool
    iterations: int


def match_groups(resp, true_labels, n_true_groups=None):
    """Map true group labels to estimated groups.

    Returns ``perm`` with ``perm[g]`` the estimated group assigned to true
    group ``g``, maximizing ``sum_k resp[k, perm[label_k]]``. Ties go to the
    lexicographically smallest permutation.
    """
    resp = np.atleast_2d(np.asarray(resp, dtype=float))
    labels = np.asarray(true_labels, dtype=int)
    G = resp.shape[1]
    n_true = int(n_true_groups) if n_true_groups is not None else int(labels.max()) + 1
    if n_true != G:
        raise GroupCountMismatch(f"{G} estimated groups vs {n_true} true groups")
    # gain[g, h]: mass that true group g places on estimated group h.
    gain = np.zeros((G, G))
    np.add.at(gain, labels, resp)
    if G > EXHAUSTIVE_MATCH_LIMIT:
        rows, cols = linear_sum_assignment(gain, maximize=True)
        return tuple(int(c) for c in cols[np.argsort(rows)])
    best, best_perm = -np.inf, None
    for perm in itertools.permutations(range(G)):
        total = gain[np.arange(G), perm].sum()
        if total > best:
            best, best_perm = total, perm
    return tuple(best_perm)


def auc(scores, labels):
    """Area under the ROC curve as the Mann-Whitney statistic.

    Tied positive/negative pairs count one half.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUC needs both positive and negative labels")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def nmse(true_var, est_var):
    """``||true - est||^2 / ||true||^2``."""
    t = np.ravel(np.asarray(true_var, dtype=float))
    e = np.ravel(np.asarray(est_var, dtype=float))
    if t.shape != e.shape:
        raise ValueError(f"length mismatch: {t.size} vs {e.size}")
    denom = float(t @ t)
    if denom == 0.0:
        raise ZeroTruth("true variances are all zero")
    diff = t - e
    return float(diff @ diff) / denom


def score_trial(variances, resp, labels, true_variances, fault_mask=None,
                converged=True, iterations=0, per_group=False):
    """Score one inference run against ground truth.

    Parameters
    ----------
    variances : ndarray, shape (G_est, N)
        Estimated per-group KCC variances.
    resp : ndarray, shape (K, G_est)
        Responsibilities used to match estimated to true groups.
    labels : ndarray, shape (K,)
        True group of every sample.
    true_variances : ndarray, shape (G, N)
    fault_mask : ndarray of bool, shape (G, N), optional
        Which KCCs are faulty in each true group. Defaults to entries above
        the smallest true variance.
    per_group : bool
        Average per-group AUCs instead of pooling all ``G * N`` scores.

    A single estimated group (a stationary baseline) is compared against
    every true group.
    """
    variances = np.atleast_2d(np.asarray(variances, dtype=float))
    true_variances = np.atleast_2d(np.asarray(true_variances, dtype=float))
    G = true_variances.shape[0]
    if fault_mask is None:
        fault_mask = true_variances > true_variances.min()
    fault_mask = np.asarray(fault_mask, dtype=bool)
    if variances.shape[0] == 1 and G > 1:
        perm = (0,) * G
    else:
        perm = match_groups(resp, labels, n_true_groups=G)
    matched = variances[list(perm)]
    if per_group:
        score = float(np.mean([auc(matched[g], fault_mask[g]) for g in range(G)]))
    else:
        score = auc(matched.ravel(), fault_mask.ravel())
    return TrialResult(
        auc=score,
        nmse=nmse(true_variances, matched),
        matched_permutation=tuple(int(p) for p in perm),
        converged=bool(converged),
        iterations=int(iterations),
    )


@dataclass
class Summary:
    trials: int
    mean_auc: float
    sd_auc: float
    min_auc: float
    max_auc: float
    mean_nmse: float
    sd_nmse: float
    min_nmse: float
    max_nmse: float
    conv_rate: float

    def to_dict(self):
        return asdict(self)


def _mean_sd(values):
    n = len(values)
    mean = math.fsum(values) / n
    if n == 1:
        return mean, 0.0
    return mean, math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1))


def aggregate(results):
    """Mean, sample standard deviation, min and max of AUC and NMSE."""
    results = list(results)
    if not results:
        raise EmptyInput("no trial results to aggregate")
    aucs = [r.auc for r in results]
    errs = [r.nmse for r in results]
    mean_auc, sd_auc = _mean_sd(aucs)
    mean_nmse, sd_nmse = _mean_sd(errs)
    return Summary(
        trials=len(results),
        mean_auc=mean_auc, sd_auc=sd_auc, min_auc=min(aucs), max_auc=max(aucs),
        mean_nmse=mean_nmse, sd_nmse=sd_nmse, min_nmse=min(errs), max_nmse=max(errs),
        conv_rate=sum(r.converged for r in results) / len(results),
    )
