"""Synthetic fault scenarios: dictionaries, correlated KCC draws, grouped samples."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import ValidationError
from .model import (BlockStructure, CorrelationBlocks, Dataset,
                    FaultQualityModel, equicorrelation,
                    equicorrelation_interval, write_matrix)
from .numerics import cholesky_lower

_SEED_MASK = 0xFFFFFFFFFFFFFFFF


def make_rng(seed, *stream):
    """Counter-based generator for ``seed``, optionally split by stream ids."""
    ss = np.random.SeedSequence([int(seed) & _SEED_MASK, *[int(s) for s in stream]])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class Scenario:
    """Description of a grouped, block-correlated synthetic experiment.

    ``faulty_blocks[g]`` lists the block indices (internal block numbering of
    ``structure``) whose KCCs carry ``fault_variance`` in group ``g``; all
    other KCCs carry ``nonfault_variance``. ``phi`` replaces the sampled
    dictionary when given (user column order).
    """

    M: int
    structure: BlockStructure
    faulty_blocks: Sequence[Sequence[int]]
    correlation: float = 0.5
    fault_variance: float = 1.0
    nonfault_variance: float = 0.01
    noise_variance: float = 1e-6
    samples_per_group: int = 60
    shuffle: bool = True
    seed: int = 0
    phi: Optional[np.ndarray] = None
    name: str = "custom"

    @property
    def N(self):
        return self.structure.n_kcc

    @property
    def n_groups(self):
        return len(self.faulty_blocks)

    def correlations(self):
        return CorrelationBlocks.uniform(self.structure, self.correlation)

    def true_variances(self):
        """Per-group KCC variances, shape ``(G, N)``, user order."""
        internal = np.full((self.n_groups, self.N), float(self.nonfault_variance))
        block_of = self.structure.block_of
        for g, blocks in enumerate(self.faulty_blocks):
            internal[g, np.isin(block_of, list(blocks))] = self.fault_variance
        return self.structure.to_user(internal, axis=1)

    def fault_sets(self):
        """User-order KCC indices that are faulty in each group."""
        return [set(np.flatnonzero(v == self.fault_variance).tolist())
                for v in self.true_variances()]

    def with_correlation(self, k):
        from dataclasses import replace
        return replace(self, correlation=float(k))

    def validate(self):
        """All problems with this scenario, as human-readable strings."""
        problems = []
        R = self.structure.n_blocks
        if self.M < 1:
            problems.append("M must be >= 1")
        if not self.faulty_blocks:
            problems.append("at least one group is required")
        for g, blocks in enumerate(self.faulty_blocks):
            bad = [b for b in blocks if not 0 <= int(b) < R]
            if bad:
                problems.append(f"group {g}: faulty blocks {bad} outside 0..{R - 1}")
        if not self.fault_variance > self.nonfault_variance > 0:
            problems.append("need fault_variance > nonfault_variance > 0")
        if self.noise_variance < 0:
            problems.append("noise_variance must be >= 0")
        if self.samples_per_group < 1:
            problems.append("samples_per_group must be >= 1")
        for r in range(self.structure.n_correlated):
            d = self.structure.sizes[r]
            lo, hi = equicorrelation_interval(d)
            if not lo < self.correlation < hi:
                problems.append(
                    f"correlation {self.correlation} outside PD interval ({lo:g}, {hi:g}) of block {r} (d={d})")
        if self.phi is not None:
            phi = np.asarray(self.phi)
            if phi.shape != (self.M, self.N):
                problems.append(f"phi has shape {phi.shape}, expected ({self.M}, {self.N})")
        return problems


def sample_dictionary(M, N, seed):
    """``M x N`` matrix whose columns are uniform on the unit sphere."""
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed, 0)
    cols = rng.standard_normal((M, N))
    norms = np.linalg.norm(cols, axis=0)
    # A zero Gaussian column has probability zero but would divide by zero.
    while np.any(norms == 0.0):
        bad = norms == 0.0
        cols[:, bad] = rng.standard_normal((M, int(bad.sum())))
        norms = np.linalg.norm(cols, axis=0)
    return FaultQualityModel(cols / norms)


def draw_kcc_block(gamma_inv, corr_inverse, rng, size=None):
    """Draw KCCs with covariance ``gamma_inv * corr_inverse``.

    Uses ``L @ u`` with ``L`` the lower Cholesky factor and ``u`` standard
    normal, which gives the same covariance as the row-vector form
    ``(u' chol(C))'`` with an upper factor.

    Returns shape ``(d,)`` or ``(size, d)``.
    """
    C = gamma_inv * np.atleast_2d(np.asarray(corr_inverse, dtype=float))
    L = cholesky_lower(C)
    d = C.shape[0]
    if size is None:
        return L @ rng.standard_normal(d)
    return rng.standard_normal((size, d)) @ L.T


def generate(scenario):
    """Draw the fault-pattern matrix and a grouped dataset with ground truth."""
    problems = scenario.validate()
    if problems:
        raise ValidationError(problems)
    st = scenario.structure
    if scenario.phi is None:
        model = sample_dictionary(scenario.M, scenario.N, make_rng(scenario.seed, 0))
    else:
        model = FaultQualityModel(scenario.phi)
    rng = make_rng(scenario.seed, 1)
    corr = scenario.correlations()
    G, n = scenario.n_groups, scenario.samples_per_group
    K = G * n
    x_int = np.empty((K, scenario.N))
    labels = np.repeat(np.arange(G), n)
    for g, faulty in enumerate(scenario.faulty_blocks):
        rows = slice(g * n, (g + 1) * n)
        for r in range(st.n_blocks):
            var = scenario.fault_variance if r in set(faulty) else scenario.nonfault_variance
            s, e = st.block_range(r)
            x_int[rows, s:e] = draw_kcc_block(var, corr.inverse_block(r), rng, size=n)
    x = st.to_user(x_int, axis=1)
    noise = np.sqrt(scenario.noise_variance) * rng.standard_normal((K, scenario.M))
    samples = x @ model.phi.T + noise
    origin = np.arange(K)
    if scenario.shuffle:
        origin = make_rng(scenario.seed, 2).permutation(K)
        samples, x, labels = samples[origin], x[origin], labels[origin]
    data = Dataset(samples, x=x, labels=labels,
                   true_variances=scenario.true_variances(), origin=origin)
    return model, data


def export_dataset(directory, model, data):
    """Write ``phi.txt``, ``Y.txt`` and, when present, ground-truth files."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "phi.txt")
    data.save(out / "Y.txt")
    if data.has_truth:
        write_matrix(out / "X.txt", data.x.T)
        write_matrix(out / "labels.txt", data.labels[None, :])
        write_matrix(out / "true_variances.txt", data.true_variances)
    return out


# -- presets ---------------------------------------------------------------

def numerical_scenario(correlation=0.5, seed=0, **overrides):
    """Two groups on a random 8 x 40 dictionary.

    Two correlated lists of three KCCs; each group has one list plus three
    independent KCCs as faults, with no fault shared between groups.
    """
    structure = BlockStructure.from_lists(40, [[0, 1, 2], [3, 4, 5]])
    params = dict(M=8, structure=structure, faulty_blocks=[[0, 2, 3, 4], [1, 5, 6, 7]],
                  correlation=correlation, samples_per_group=60, seed=seed,
                  name="numerical")
    params.update(overrides)
    return Scenario(**params)


#: KCC8..KCC13 and KCC31..KCC33 of the floor-pan assembly, 0-based.
ASSEMBLY_LISTS = [[7, 8, 9, 10, 11, 12], [30, 31, 32]]


def assembly_scenario(correlation=0.5, seed=0, phi=None, group2_independent=1, **overrides):
    """Floor-pan assembly layout: 33 KCCs, 12 KPCs, lists of six and three.

    Group 1 has the first list as faults; group 2 has both lists plus
    ``group2_independent`` independent KCCs (the lowest-numbered ones).
    Without ``phi`` a unit-sphere dictionary stands in for the real
    fault-pattern matrix.
    """
    structure = BlockStructure.from_lists(33, ASSEMBLY_LISTS)
    group2 = [0, 1] + list(range(2, 2 + int(group2_independent)))
    params = dict(M=12, structure=structure, faulty_blocks=[[0], group2],
                  correlation=correlation, samples_per_group=50, seed=seed,
                  phi=phi, name="assembly")
    params.update(overrides)
    return Scenario(**params)


def assembly_random_scenario(correlation=0.5, seed=0, phi=None, group2_independent=2, **overrides):
    """Assembly layout with two correlated lists of three drawn at random."""
    picks = make_rng(seed, 3).permutation(33)[:6]
    structure = BlockStructure.from_lists(33, [sorted(picks[:3].tolist()), sorted(picks[3:].tolist())])
    group2 = [0, 1] + list(range(2, 2 + int(group2_independent)))
    params = dict(M=12, structure=structure, faulty_blocks=[[0], group2],
                  correlation=correlation, samples_per_group=50, seed=seed,
                  phi=phi, name="assembly-random")
    params.update(overrides)
    return Scenario(**params)


PRESETS = {
    "numerical": numerical_scenario,
    "assembly": assembly_scenario,
    "assembly-random": assembly_random_scenario,
}
