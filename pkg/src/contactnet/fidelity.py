"""Network-versus-data fidelity: ego-network EMD, stratified matching, baselines.

The error between one data ego and one model ego is an optimal-transport
problem over the 9 contact-age categories with ground cost |a - b| / ||d||
(normalized by the data ego's total), moving min(||d||, ||k||) mass subject to
the histogram marginals, plus a penalty for the unmatched mass:

    cost = flow / ||d||  +  c / ((||d|| + ||k||) / 2 + 1) * | ||d|| - ||k|| |

with c = 10. A sample of model egos is matched one-to-one against the data
sample by a linear sum assignment whose cross-age cost is infinite, i.e. the
assignment decomposes into one block per age group.

The transport problem is solved exactly as a min-cost flow (successive
shortest augmenting paths on the support-compressed bipartite network); the
balanced case uses the one-dimensional prefix-sum identity instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import inf

import numpy as np
from scipy.optimize import linear_sum_assignment

from .common import N_AGE, N_DUR, spawn_rng
from .gmm import FittedModels, fit_age_stratified, log_transform
from .networks import (
    ContactNetwork,
    PopulationSpec,
    build_contact_matrix,
    generate_gmm_network,
    generate_sbm,
)
from .survey import EgoVector

PENALTY_SCALE = 10.0


def unmatched_penalty(total_d: float, total_k: float, c: float = PENALTY_SCALE) -> float:
    """Penalty for the mass the transport plan cannot move.

    The per-pair rate c / (mean degree + 1) is multiplied by the absolute mass
    difference, so each extra unmatched contact costs one penalty unit. This
    is the single place that convention lives.
    """
    diff = abs(total_d - total_k)
    if diff == 0:
        return 0.0
    return c / ((total_d + total_k) / 2.0 + 1.0) * diff


class _MinCostFlow:
    """Successive-shortest-path min cost flow on a tiny graph.

    Nodes are dense integers; Dijkstra runs as linear scans (the graphs here
    have at most 20 nodes). Costs must be nonnegative; Johnson potentials keep
    reduced costs nonnegative across augmentations.
    """

    def __init__(self, n: int):
        self.n = n
        self.graph: list[list] = [[] for _ in range(n)]

    def add_edge(self, u: int, v: int, cap, cost) -> None:
        self.graph[u].append([v, cap, cost, len(self.graph[v])])
        self.graph[v].append([u, 0, -cost, len(self.graph[u]) - 1])

    def run(self, s: int, t: int, max_flow):
        n, graph = self.n, self.graph
        potential = [0.0] * n
        flow = 0
        cost = 0.0
        while flow < max_flow:
            dist = [inf] * n
            dist[s] = 0.0
            done = [False] * n
            prev_arc = [None] * n
            while True:
                u, best = -1, inf
                for v in range(n):
                    if not done[v] and dist[v] < best:
                        best, u = dist[v], v
                if u < 0:
                    break
                done[u] = True
                du = dist[u]
                pu = potential[u]
                for idx, arc in enumerate(graph[u]):
                    if arc[1] > 0:
                        v = arc[0]
                        nd = du + arc[2] + pu - potential[v]
                        if nd < dist[v]:
                            dist[v] = nd
                            prev_arc[v] = (u, idx)
            if dist[t] == inf:
                break
            for v in range(n):
                if dist[v] < inf:
                    potential[v] += dist[v]
            push = max_flow - flow
            v = t
            while v != s:
                u, idx = prev_arc[v]
                push = min(push, graph[u][idx][1])
                v = u
            v = t
            while v != s:
                u, idx = prev_arc[v]
                arc = graph[u][idx]
                arc[1] -= push
                graph[arc[0]][arc[3]][1] += push
                v = u
            flow += push
            cost += push * potential[t]
        return flow, cost


def _transport_cost(d: np.ndarray, k: np.ndarray, move: float) -> float:
    """Minimal cost of moving `move` mass from d to k with unit cost |a - b|."""
    if move <= 0:
        return 0.0
    if d.sum() == k.sum():
        # Balanced 1-D transport: cost is the total cumulative imbalance.
        return float(np.abs(np.cumsum(d - k)[:-1]).sum())

    src = np.flatnonzero(d)
    dst = np.flatnonzero(k)
    n_src, n_dst = len(src), len(dst)
    net = _MinCostFlow(n_src + n_dst + 2)
    s, t = n_src + n_dst, n_src + n_dst + 1
    for p, a in enumerate(src):
        net.add_edge(s, p, d[a], 0)
    for q, b in enumerate(dst):
        net.add_edge(n_src + q, t, k[b], 0)
    for p, a in enumerate(src):
        for q, b in enumerate(dst):
            net.add_edge(p, n_src + q, move, abs(int(a) - int(b)))
    shipped, cost = net.run(s, t, move)
    if shipped != move:
        raise AssertionError(f"transport shipped {shipped} of {move}")
    return float(cost)


def emd(d: np.ndarray, k: np.ndarray, c: float = PENALTY_SCALE) -> float:
    """Earth mover's distance between two 9-cell age histograms.

    `d` is the data-side histogram: its total normalizes the ground cost.
    Both-empty histograms compare at distance zero.
    """
    d = np.asarray(d)
    k = np.asarray(k)
    total_d = float(d.sum())
    total_k = float(k.sum())
    if total_d == 0.0 and total_k == 0.0:
        return 0.0
    move = min(total_d, total_k)
    cost = 0.0
    if move > 0:
        cost = _transport_cost(d, k, move) / total_d
    return cost + unmatched_penalty(total_d, total_k, c)


class EmdCache:
    """Memo for emd() keyed by the exact histogram pair bytes."""

    def __init__(self, c: float = PENALTY_SCALE):
        self.c = c
        self._memo: dict = {}

    def __len__(self):
        return len(self._memo)

    def get(self, d: np.ndarray, k: np.ndarray) -> float:
        key = (d.tobytes(), k.tobytes())
        hit = self._memo.get(key)
        if hit is None:
            hit = emd(d, k, self.c)
            self._memo[key] = hit
        return hit


@dataclass
class MatchResult:
    total: float
    per_individual: float
    size: int
    per_age: dict = field(default_factory=dict)  # age -> (block total, block size)
    zero_data_egos: int = 0


def _block_costs(
    d_hists: np.ndarray, k_hists: np.ndarray, cache: EmdCache
) -> np.ndarray:
    """Pairwise EMD matrix for one block, deduplicating repeated histograms."""
    du, dinv = np.unique(d_hists, axis=0, return_inverse=True)
    ku, kinv = np.unique(k_hists, axis=0, return_inverse=True)
    costs = np.empty((len(du), len(ku)))
    for p in range(len(du)):
        dp = du[p]
        for q in range(len(ku)):
            costs[p, q] = cache.get(dp, ku[q])
    return costs[np.ix_(dinv, kinv)]


def match_error(
    data_hists: np.ndarray,
    data_ages: np.ndarray,
    model_hists: np.ndarray,
    model_ages: np.ndarray,
    stratify_by_age: bool = True,
    cache: EmdCache | None = None,
) -> MatchResult:
    """Minimal one-to-one matching cost between data and model ego samples.

    With age stratification (the default), samples must agree in size and
    per-age composition, and the assignment is solved per age block — exactly
    the infinite-cross-age-cost formulation without materializing sentinels.
    Without stratification everything lands in a single block (the "no age"
    matching variant).
    """
    data_hists = np.asarray(data_hists)
    model_hists = np.asarray(model_hists)
    data_ages = np.asarray(data_ages)
    model_ages = np.asarray(model_ages)
    if len(data_hists) != len(model_hists):
        raise ValueError(f"sample sizes differ: {len(data_hists)} vs {len(model_hists)}")
    if cache is None:
        cache = EmdCache()

    if stratify_by_age:
        d_comp = np.bincount(data_ages, minlength=N_AGE)
        k_comp = np.bincount(model_ages, minlength=N_AGE)
        if not np.array_equal(d_comp, k_comp):
            raise ValueError(
                f"age compositions differ: data {d_comp.tolist()} vs model {k_comp.tolist()}"
            )
        blocks = [
            (a, np.flatnonzero(data_ages == a), np.flatnonzero(model_ages == a))
            for a in range(N_AGE)
            if d_comp[a] > 0
        ]
    else:
        blocks = [(-1, np.arange(len(data_hists)), np.arange(len(model_hists)))]

    total = 0.0
    per_age = {}
    for age, d_idx, k_idx in blocks:
        costs = _block_costs(data_hists[d_idx], model_hists[k_idx], cache)
        rows, cols = linear_sum_assignment(costs)
        block_total = float(costs[rows, cols].sum())
        total += block_total
        per_age[age] = (block_total, len(d_idx))

    size = len(data_hists)
    return MatchResult(
        total=total,
        per_individual=total / size if size else 0.0,
        size=size,
        per_age=per_age,
        zero_data_egos=int((data_hists.sum(axis=1) == 0).sum()),
    )


def sample_model_egos(
    network: ContactNetwork,
    composition: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Stratified without-replacement node sample; returns (age hists, ages).

    `composition[a]` nodes are drawn from age group a; a group with too few
    nodes raises.
    """
    composition = np.asarray(composition, dtype=np.int64)
    ego45 = network.ego_vectors()
    hists = []
    ages = []
    for a in range(N_AGE):
        want = int(composition[a])
        if want == 0:
            continue
        members = np.flatnonzero(network.ages == a)
        if len(members) < want:
            raise ValueError(
                f"age group {a} has {len(members)} nodes, need {want} for the sample"
            )
        pick = rng.choice(members, size=want, replace=False)
        hists.append(ego45[pick].reshape(want, N_AGE, N_DUR).sum(axis=2))
        ages.append(np.full(want, a, dtype=np.int8))
    return np.vstack(hists), np.concatenate(ages)


@dataclass
class RefitSettings:
    """Mixture-fit parameters reused when the baseline protocol refits."""

    splits: int = 100
    train_frac: float = 0.8
    restarts: int = 3
    tol: float = 1e-6
    max_iter: int = 500
    pooled: bool = False

    def fit(self, log_vectors_by_age: dict, seed: int) -> FittedModels:
        return fit_age_stratified(
            log_vectors_by_age,
            seed,
            splits=self.splits,
            train_frac=self.train_frac,
            pooled=self.pooled,
            restarts=self.restarts,
            tol=self.tol,
            max_iter=self.max_iter,
        )


@dataclass
class FidelityReport:
    """Per-individual matching error aggregated over network realizations."""

    method: str
    kind: str  # "data-fit" or "self-fit"
    errors: list  # per-realization per-individual error
    per_age_means: dict
    zero_data_egos: int = 0
    flags: list = field(default_factory=list)

    @property
    def realizations(self) -> int:
        return len(self.errors)

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))

    def interval(self) -> tuple[float, float]:
        """Normal-approximation 95% confidence interval for the mean."""
        errs = np.asarray(self.errors, dtype=float)
        if len(errs) < 2:
            return (self.mean, self.mean)
        half = 1.96 * errs.std(ddof=1) / np.sqrt(len(errs))
        return (self.mean - half, self.mean + half)

    def to_rows(self, dataset: str) -> list[dict]:
        lo, hi = self.interval()
        rows = []
        for r, err in enumerate(self.errors):
            rows.append(
                {
                    "dataset": dataset,
                    "method": self.method,
                    "kind": self.kind,
                    "realization": r,
                    "per_individual_emd": err,
                    "mean": self.mean,
                    "ci_low": lo,
                    "ci_high": hi,
                }
            )
        return rows


def _aggregate(method, kind, results, flags=None) -> FidelityReport:
    per_age_totals: dict = {}
    for res in results:
        for age, (block_total, block_size) in res.per_age.items():
            tot, sz = per_age_totals.get(age, (0.0, 0))
            per_age_totals[age] = (tot + block_total, sz + block_size)
    per_age_means = {age: tot / sz for age, (tot, sz) in per_age_totals.items() if sz}
    return FidelityReport(
        method=method,
        kind=kind,
        errors=[r.per_individual for r in results],
        per_age_means=per_age_means,
        zero_data_egos=max((r.zero_data_egos for r in results), default=0),
        flags=list(flags or []),
    )


def _generate(method, fitted, spec, rng) -> ContactNetwork:
    if method == "gmm":
        return generate_gmm_network(fitted, spec, rng)
    if method == "sbm":
        return generate_sbm(fitted, spec, rng)
    raise ValueError(f"unknown generator method {method!r}")


def data_fit_report(
    method: str,
    fitted,
    spec: PopulationSpec,
    data_hists: np.ndarray,
    data_ages: np.ndarray,
    seed: int,
    realizations: int,
    stratify_by_age: bool = True,
    cache: EmdCache | None = None,
) -> FidelityReport:
    """Model-vs-data error: regenerate the network and resample per realization.

    data_hists are per-ego age histograms (one bin per age group); collapse
    duration before calling.
    """
    if cache is None:
        cache = EmdCache()
    if data_hists.shape[1] != N_AGE:
        raise ValueError(
            f"data_hists must have {N_AGE} age bins, got {data_hists.shape[1]}"
        )
    composition = np.bincount(data_ages, minlength=N_AGE)
    results = []
    for r in range(realizations):
        rng = spawn_rng(seed, 30, r)
        net = _generate(method, fitted, spec, rng)
        model_hists, model_ages = sample_model_egos(net, composition, rng)
        results.append(
            match_error(data_hists, data_ages, model_hists, model_ages,
                        stratify_by_age, cache)
        )
    return _aggregate(method, "data-fit", results)


def _stratified_census_counts(n_sample: int, proportions: np.ndarray) -> np.ndarray:
    return np.ceil(n_sample * np.asarray(proportions)).astype(np.int64)


def self_fit_baseline(
    method: str,
    fitted,
    spec: PopulationSpec,
    n_sample: int,
    seed: int,
    realizations: int,
    refit: RefitSettings | None = None,
    stratify_by_age: bool = True,
    refit_per_realization: bool = False,
    cache: EmdCache | None = None,
) -> FidelityReport:
    """Noise floor of the whole fit-generate-match loop on model-true data.

    A surrogate network is generated from the fitted model, a stratified
    census sample of its egos becomes a synthetic survey, the synthetic survey
    is refit from scratch, and fresh surrogates from the refit models are
    matched back against the synthetic survey. The spread over realizations is
    the baseline error distribution.
    """
    refit = refit or RefitSettings()
    if cache is None:
        cache = EmdCache()
    counts = _stratified_census_counts(n_sample, spec.age_proportions)

    def build_synthetic(rng):
        first = _generate(method, fitted, spec, rng)
        ego45 = first.ego_vectors()
        rows = []
        ages = []
        for a in range(N_AGE):
            want = int(counts[a])
            if want == 0:
                continue
            members = np.flatnonzero(first.ages == a)
            if len(members) < want:
                raise ValueError(f"surrogate too small in age group {a}")
            pick = rng.choice(members, size=want, replace=False)
            rows.append(ego45[pick])
            ages.append(np.full(want, a, dtype=np.int8))
        return np.vstack(rows), np.concatenate(ages)

    def refit_models(synth45, synth_ages, rng_seed):
        if method == "sbm":
            vectors = [EgoVector(row, int(a)) for row, a in zip(synth45, synth_ages)]
            return build_contact_matrix(vectors)
        by_age = {
            a: log_transform(synth45[synth_ages == a])
            for a in range(N_AGE)
            if (synth_ages == a).any()
        }
        return refit.fit(by_age, rng_seed)

    results = []
    synth45 = synth_ages = refitted = None
    for r in range(realizations):
        rng = spawn_rng(seed, 40, r)
        if refitted is None or refit_per_realization:
            synth45, synth_ages = build_synthetic(rng)
            refit_seed = int(spawn_rng(seed, 41, r).integers(2**62))
            refitted = refit_models(synth45, synth_ages, refit_seed)
        data_hists = synth45.reshape(len(synth45), N_AGE, N_DUR).sum(axis=2)
        net2 = _generate(method, refitted, spec, rng)
        composition = np.bincount(synth_ages, minlength=N_AGE)
        model_hists, model_ages = sample_model_egos(net2, composition, rng)
        results.append(
            match_error(data_hists, synth_ages, model_hists, model_ages,
                        stratify_by_age, cache)
        )
    return _aggregate(method, "self-fit", results)
