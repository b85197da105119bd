"""Synthetic benchmark settings: random graphs, weights and intervention suites."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .graph import (
    CausalGraph,
    CyclicGraphError,
    Dataset,
    GroundTruthSEM,
    InterventionSpec,
    simulate_experiment,
)

# name -> (interventional, activation, cyclic)
SETTINGS = {
    "int-dag-lin": (True, "linear", False),
    "int-dag-nonlin": (True, "selu", False),
    "int-cyc-lin": (True, "linear", True),
    "int-cyc-nonlin": (True, "relu", True),
    "obs-lin": (False, "linear", False),
    "obs-nonlin": (False, "relu", False),
}

WEIGHT_LOW, WEIGHT_HIGH = 0.25, 1.0


@dataclass(frozen=True)
class SettingSpec:
    name: str
    d: int = 20
    density: float = 2.0
    n_per_intervention: int = 5000
    n_observational: int = 20000
    n_test_experiments: int = 10
    n_test_samples: int = 1000
    target_lipschitz: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.name not in SETTINGS:
            raise ValueError(f"unknown setting {self.name!r}; valid settings: {', '.join(SETTINGS)}")
        if self.d < 1:
            raise ValueError("d must be positive")

    @property
    def interventional(self) -> bool:
        return SETTINGS[self.name][0]

    @property
    def activation(self) -> str:
        return SETTINGS[self.name][1]

    @property
    def cyclic(self) -> bool:
        return SETTINGS[self.name][2]

    @property
    def contractive(self) -> bool:
        return self.activation != "selu"

    def to_dict(self) -> dict:
        return asdict(self)


def generate_er_graph(d: int, density: float, cyclic: bool, seed) -> CausalGraph:
    """Erdos-Renyi graph with ``d * density`` expected edges.

    Cyclic graphs draw every ordered pair with ``p = density / (d - 1)``.
    Acyclic graphs draw only pairs consistent with a random causal order, with
    ``p = 2 * density / (d - 1)`` (capped at 1) so the expected edge count is
    the same.
    """
    if d == 1 or density <= 0:
        return CausalGraph.empty(d)
    rng = np.random.default_rng(seed)
    if cyclic:
        p = min(density / (d - 1), 1.0)
        edges = (rng.random((d, d)) < p).astype(np.int64)
        np.fill_diagonal(edges, 0)
        return CausalGraph(edges)
    p = min(2.0 * density / (d - 1), 1.0)
    order = rng.permutation(d)
    lower = np.tril(rng.random((d, d)) < p, k=-1).astype(np.int64)
    # lower[a, b] = 1 means the b-th node in the order is a parent of the a-th
    edges = np.zeros((d, d), dtype=np.int64)
    edges[np.ix_(order, order)] = lower
    return CausalGraph(edges)


def sample_weights(graph: CausalGraph, activation: str, contractive: bool, target_lipschitz: float = 0.9,
                   seed=None, noise_scale: float = 1.0) -> GroundTruthSEM:
    """Uniform weights on +-[0.25, 1] over the graph's edges.

    When ``contractive`` the whole matrix is rescaled to spectral norm
    ``target_lipschitz`` exactly; otherwise (acyclic graphs only) it is left as drawn.
    """
    if not contractive and not graph.is_acyclic():
        raise CyclicGraphError("non-contractive weights require an acyclic graph")
    rng = np.random.default_rng(seed)
    d = graph.d
    mag = rng.uniform(WEIGHT_LOW, WEIGHT_HIGH, size=(d, d))
    sign = rng.choice([-1.0, 1.0], size=(d, d))
    w = mag * sign * graph.edges
    bound = None
    if contractive and graph.n_edges > 0:
        w *= target_lipschitz / np.linalg.norm(w, 2)
        bound = target_lipschitz
    return GroundTruthSEM(graph, w, activation, np.full(d, noise_scale), lipschitz_bound=bound)


def _seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


def _test_suite(spec: SettingSpec, sem: GroundTruthSEM, ss: np.random.SeedSequence) -> Dataset:
    rng = np.random.default_rng(ss)
    d = spec.d
    exps = []
    for child in ss.spawn(spec.n_test_experiments):
        size = min(int(rng.choice([2, 3])), d)
        targets = tuple(int(t) for t in rng.choice(d, size=size, replace=False))
        exps.append(simulate_experiment(sem, InterventionSpec(targets), spec.n_test_samples, child))
    return Dataset(d, exps)


def build_ground_truth(spec: SettingSpec) -> GroundTruthSEM:
    s_graph, s_weights = _seeds(spec.seed, 2)
    graph = generate_er_graph(spec.d, spec.density, spec.cyclic, s_graph)
    return sample_weights(graph, spec.activation, spec.contractive, spec.target_lipschitz, s_weights)


def build_test_set(spec: SettingSpec, sem: GroundTruthSEM | None = None) -> Dataset:
    """The holdout suite :func:`build_setting` would return for ``spec``."""
    sem = build_ground_truth(spec) if sem is None else sem
    return _test_suite(spec, sem, _seeds(spec.seed, 4)[3])


def build_setting(spec: SettingSpec) -> tuple[GroundTruthSEM, Dataset, Dataset]:
    """Ground truth plus training and multi-node-intervention test datasets."""
    sem = build_ground_truth(spec)
    s_train = _seeds(spec.seed, 4)[2]
    if spec.interventional:
        exps = [
            simulate_experiment(sem, InterventionSpec((i,)), spec.n_per_intervention, child)
            for i, child in enumerate(s_train.spawn(spec.d))
        ]
    else:
        exps = [simulate_experiment(sem, InterventionSpec(), spec.n_observational, s_train)]
    return sem, Dataset(spec.d, exps), build_test_set(spec, sem)


def intervention_subset(spec: SettingSpec, k_interventions: int,
                        sem: GroundTruthSEM | None = None) -> Dataset:
    """Observational experiment plus ``k`` random distinct single-node interventions."""
    if not 0 <= k_interventions <= spec.d:
        raise ValueError(f"k_interventions must lie in [0, {spec.d}]")
    sem = build_ground_truth(spec) if sem is None else sem
    _, _, _, _, s_sub = _seeds(spec.seed, 5)
    s_pick, s_obs, s_int = s_sub.spawn(3)
    targets = sorted(np.random.default_rng(s_pick).choice(spec.d, size=k_interventions, replace=False).tolist())
    exps = [simulate_experiment(sem, InterventionSpec(), spec.n_observational, s_obs)]
    children = s_int.spawn(spec.d)
    # seeds indexed by node so nested subsets share experiments
    exps += [simulate_experiment(sem, InterventionSpec((t,)), spec.n_per_intervention, children[t]) for t in targets]
    return Dataset(spec.d, exps)
