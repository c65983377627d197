"""Population-scale contact network construction.

Two generators over a common representation:

- The mixture-model network: every node gets a 45-cell stub vector sampled
  from its age group's fitted mixture, directional stub totals are rebalanced
  toward their mean, and a stratified configuration wiring connects compatible
  stubs block by block (age pair x duration), keeping the graph simple.
- The block-model comparator: independent pair probabilities chosen so a
  node's expected degree toward each group matches the survey contact matrix,
  with edge durations drawn from the block's duration breakdown.

Edges carry a duration category and a weight equal to the category midpoint
normalized by the top category (4hr+ counts as 8 hours), so weights are
{2.5, 10, 37.5, 150, 480} / 480.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .common import (
    DURATION_WEIGHTS,
    N_AGE,
    N_CELLS,
    N_DUR,
    cell_index,
    stochastic_round,
)
from .gmm import FittedModels, sample_egos


@dataclass
class PopulationSpec:
    n: int
    age_proportions: np.ndarray

    def __post_init__(self):
        self.age_proportions = np.asarray(self.age_proportions, dtype=float)
        if self.n < 1:
            raise ValueError("population size must be >= 1")
        if self.age_proportions.shape != (N_AGE,):
            raise ValueError(f"need {N_AGE} age proportions")
        if (self.age_proportions < 0).any():
            raise ValueError("age proportions must be nonnegative")
        total = self.age_proportions.sum()
        if not np.isclose(total, 1.0, atol=1e-9):
            raise ValueError(f"age proportions sum to {total}, expected 1")


def assign_node_ages(spec: PopulationSpec) -> np.ndarray:
    """Group sizes by largest-remainder rounding of n * p; returns per-node ages."""
    ideal = spec.n * spec.age_proportions
    counts = np.floor(ideal).astype(np.int64)
    short = spec.n - counts.sum()
    if short > 0:
        # Hand the leftover nodes to the largest fractional parts, ties by index.
        order = np.lexsort((np.arange(N_AGE), -(ideal - counts)))
        counts[order[:short]] += 1
    return np.repeat(np.arange(N_AGE, dtype=np.int8), counts)


@dataclass
class StubLedger:
    ages: np.ndarray  # (n,) int8
    z: np.ndarray  # (n, 45) stub counts; integer dtype once finalized
    rebalanced: bool = False
    scale_factors: dict = field(default_factory=dict)  # (a, b, tau) -> s
    zero_direction_blocks: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.ages)

    def directed_totals(self) -> np.ndarray:
        """L[a, x]: total stubs from age group a toward age-duration cell x."""
        totals = np.zeros((N_AGE, N_CELLS))
        for a in range(N_AGE):
            mask = self.ages == a
            if mask.any():
                totals[a] = self.z[mask].sum(axis=0)
        return totals


def sample_stub_ledger(
    models: FittedModels, spec: PopulationSpec, rng: np.random.Generator
) -> StubLedger:
    """Assign node ages and draw each node's stub vector from its age's model."""
    ages = assign_node_ages(spec)
    z = np.zeros((len(ages), N_CELLS), dtype=np.int64)
    for a in range(N_AGE):
        idx = np.flatnonzero(ages == a)
        if len(idx) == 0:
            continue
        if a not in models.models:
            raise ValueError(f"no fitted model for populated age group {a}")
        z[idx] = sample_egos(models.model_for(a), len(idx), rng)
    return StubLedger(ages, z)


def rebalance_stubs(ledger: StubLedger, rng: np.random.Generator) -> StubLedger:
    """Scale the deficient direction of every cross-group block to the mean.

    For ordered (a -> cell (b, tau)) with reciprocal (b -> cell (a, tau)),
    the smaller total is multiplied by s = (L + L_rev) / (2 min(L, L_rev)) so
    its expectation lands on the mean of the two; the larger side is left
    alone. Within-group blocks are their own reciprocal, so s = 1. Blocks with
    one direction zero cannot be scaled and are flagged. Scaled values are
    stochastically rounded back to integers (integer cells pass through).
    """
    totals = ledger.directed_totals()
    z = ledger.z.astype(float)
    by_age = [np.flatnonzero(ledger.ages == a) for a in range(N_AGE)]
    scale_factors = {}
    zero_blocks = []

    for a in range(N_AGE):
        for b in range(a + 1, N_AGE):
            for tau in range(N_DUR):
                fwd = totals[a, cell_index(b, tau)]
                rev = totals[b, cell_index(a, tau)]
                if fwd == rev:
                    continue
                low, high = (a, b) if fwd < rev else (b, a)
                low_total, high_total = min(fwd, rev), max(fwd, rev)
                if low_total == 0:
                    zero_blocks.append((a, b, tau))
                    continue
                s = (low_total + high_total) / (2.0 * low_total)
                scale_factors[(a, b, tau)] = s
                cell = cell_index(high, tau)  # the deficient side points AT `high`
                z[by_age[low], cell] *= s

    rounded = stochastic_round(z, rng)
    return StubLedger(
        ledger.ages.copy(),
        rounded,
        rebalanced=True,
        scale_factors=scale_factors,
        zero_direction_blocks=zero_blocks,
    )


class _Pool:
    """Candidate set with O(1) uniform pick and O(1) removal (swap-pop)."""

    __slots__ = ("items", "pos")

    def __init__(self, items):
        self.items = list(items)
        self.pos = {v: k for k, v in enumerate(self.items)}

    def __len__(self):
        return len(self.items)

    def __contains__(self, v):
        return v in self.pos

    def pick(self, rng) -> int:
        return self.items[rng.integers(len(self.items))]

    def remove(self, v):
        k = self.pos.pop(v)
        last = self.items.pop()
        if last != v:
            self.items[k] = last
            self.pos[last] = k


@dataclass
class ContactNetwork:
    ages: np.ndarray  # (n,) int8
    edge_i: np.ndarray  # (E,) int64
    edge_j: np.ndarray  # (E,) int64
    edge_tau: np.ndarray  # (E,) int8
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.ages)

    @property
    def n_edges(self) -> int:
        return len(self.edge_i)

    @property
    def weights(self) -> np.ndarray:
        return DURATION_WEIGHTS[self.edge_tau]

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=np.int64)
        np.add.at(deg, self.edge_i, 1)
        np.add.at(deg, self.edge_j, 1)
        return deg

    def adjacency_csr(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(offsets, neighbors, edge weights, edge durations) with both edge
        directions materialized, for O(deg) neighbor iteration. Cached, and
        treated as read-only by everything downstream."""
        cached = getattr(self, "_csr_cache", None)
        if cached is not None:
            return cached
        n = self.n
        src = np.concatenate([self.edge_i, self.edge_j])
        dst = np.concatenate([self.edge_j, self.edge_i])
        tau = np.concatenate([self.edge_tau, self.edge_tau])
        order = np.argsort(src, kind="stable")
        src, dst, tau = src[order], dst[order], tau[order]
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.add.at(offsets, src + 1, 1)
        np.cumsum(offsets, out=offsets)
        csr = offsets, dst.astype(np.int64), DURATION_WEIGHTS[tau], tau.astype(np.int8)
        self._csr_cache = csr
        return csr

    def ego_vectors(self) -> np.ndarray:
        """Per-node 45-cell vectors of realized neighbors by (age, duration)."""
        flat = np.zeros(self.n * N_CELLS, dtype=np.int64)
        cell_j = self.ages[self.edge_j].astype(np.int64) * N_DUR + self.edge_tau
        cell_i = self.ages[self.edge_i].astype(np.int64) * N_DUR + self.edge_tau
        np.add.at(flat, self.edge_i * N_CELLS + cell_j, 1)
        np.add.at(flat, self.edge_j * N_CELLS + cell_i, 1)
        return flat.reshape(self.n, N_CELLS)


def _pick_partner(pool: _Pool, rng, i: int, adjacency: dict):
    """Uniform member of `pool` that is not i and not already linked to i.

    Rejection sampling first (candidate pools are usually much larger than one
    node's neighborhood), falling back to explicit enumeration.
    """
    taken = adjacency.get(i)
    for _ in range(24):
        j = pool.pick(rng)
        if j != i and (taken is None or j not in taken):
            return j
    candidates = [j for j in pool.items if j != i and (taken is None or j not in taken)]
    if not candidates:
        return None
    return candidates[rng.integers(len(candidates))]


def wire_configuration(ledger: StubLedger, rng: np.random.Generator) -> ContactNetwork:
    """Stratified configuration wiring of a finalized stub ledger.

    Blocks are visited in a fixed order (age pair, then duration). Within a
    block, a node with remaining stubs is picked uniformly on each side; a
    pair already linked anywhere in the network is skipped, and a node whose
    remaining candidates are all taken is retired with its stubs (the
    "complete" rule). Wiring stops when either side of the block empties;
    leftover stubs per block are reported in the metadata.
    """
    if not np.issubdtype(ledger.z.dtype, np.integer):
        raise ValueError("wire_configuration needs an integer (finalized) ledger")

    z = ledger.z.copy()
    ages = ledger.ages
    by_age = [np.flatnonzero(ages == a) for a in range(N_AGE)]
    adjacency: dict[int, set] = {}
    edges_i, edges_j, edges_tau = [], [], []
    leftovers = {}

    def link(i, j, tau):
        adjacency.setdefault(i, set()).add(j)
        adjacency.setdefault(j, set()).add(i)
        edges_i.append(i)
        edges_j.append(j)
        edges_tau.append(tau)

    for a in range(N_AGE):
        for b in range(a, N_AGE):
            for tau in range(N_DUR):
                cell_ab = cell_index(b, tau)  # stubs of a-side nodes toward (b, tau)
                cell_ba = cell_index(a, tau)  # stubs of b-side nodes toward (a, tau)

                if a == b:
                    # One shared pool; an edge consumes a stub at both ends.
                    pool = _Pool(int(i) for i in by_age[a] if z[i, cell_ab] > 0)
                    while len(pool) >= 2:
                        i = pool.pick(rng)
                        j = _pick_partner(pool, rng, i, adjacency)
                        if j is None:
                            pool.remove(i)
                            continue
                        link(i, j, tau)
                        z[i, cell_ab] -= 1
                        z[j, cell_ab] -= 1
                        if z[i, cell_ab] == 0:
                            pool.remove(i)
                        if z[j, cell_ab] == 0:
                            pool.remove(j)
                    left = int(z[pool.items, cell_ab].sum()) if len(pool) else 0
                else:
                    pool_a = _Pool(int(i) for i in by_age[a] if z[i, cell_ab] > 0)
                    pool_b = _Pool(int(j) for j in by_age[b] if z[j, cell_ba] > 0)
                    while len(pool_a) and len(pool_b):
                        i = pool_a.pick(rng)
                        j = _pick_partner(pool_b, rng, i, adjacency)
                        if j is None:
                            pool_a.remove(i)
                            continue
                        link(i, j, tau)
                        z[i, cell_ab] -= 1
                        z[j, cell_ba] -= 1
                        if z[i, cell_ab] == 0:
                            pool_a.remove(i)
                        if z[j, cell_ba] == 0:
                            pool_b.remove(j)
                    left = int(z[pool_a.items, cell_ab].sum()) + int(
                        z[pool_b.items, cell_ba].sum()
                    )
                if left:
                    leftovers[f"{a}-{b}-tau{tau}"] = left

    return ContactNetwork(
        ages.copy(),
        np.array(edges_i, dtype=np.int64),
        np.array(edges_j, dtype=np.int64),
        np.array(edges_tau, dtype=np.int8),
        meta={
            "generator": "gmm-configuration",
            "leftover_stubs": leftovers,
            "leftover_total": int(sum(leftovers.values())),
        },
    )


def assign_weights(network: ContactNetwork) -> ContactNetwork:
    """Attach duration weights (midpoint / 480 min) to the edge list in place.

    Weights are always derivable from the duration categories; this exists so
    serialized networks carry them explicitly.
    """
    network.meta["weights"] = "midpoint/480"
    return network


@dataclass
class ContactMatrix:
    """Survey contact rates: C[a, b] is the mean number of contacts a
    respondent in group a reports toward group b; C_tau resolves by duration
    and sums back to C exactly."""

    C: np.ndarray  # (9, 9)
    C_tau: np.ndarray  # (9, 9, 5)
    respondents: np.ndarray  # (9,) respondent counts per group
    empty_groups: list = field(default_factory=list)

    def duration_distribution(self, a: int, b: int) -> np.ndarray:
        """Probability over duration categories for an (a, b) edge, averaging
        the two reporting directions when both exist."""
        dists = []
        for row, col in ((a, b), (b, a)):
            if self.C[row, col] > 0:
                dists.append(self.C_tau[row, col] / self.C[row, col])
        if not dists:
            raise ValueError(f"no contacts between groups {a} and {b}")
        return np.mean(dists, axis=0)


def build_contact_matrix(vectors, spec: PopulationSpec | None = None) -> ContactMatrix:
    """Average the survey ego vectors into C and its duration decomposition."""
    sums = np.zeros((N_AGE, N_AGE, N_DUR))
    counts = np.zeros(N_AGE, dtype=np.int64)
    for vec in vectors:
        counts[vec.owner_age] += 1
        sums[vec.owner_age] += vec.counts.reshape(N_AGE, N_DUR)

    C_tau = np.zeros_like(sums)
    nonempty = counts > 0
    C_tau[nonempty] = sums[nonempty] / counts[nonempty, None, None]
    empty = np.flatnonzero(~nonempty).tolist()
    if spec is not None:
        populated = np.flatnonzero(spec.age_proportions > 0)
        missing = [a for a in populated if counts[a] == 0]
        if missing:
            empty = sorted(set(empty) | set(missing))
    return ContactMatrix(C_tau.sum(axis=2), C_tau, counts, empty)


class BlockDensityError(ValueError):
    """A block's pair probability exceeded 1: population too small for the rates."""


def generate_sbm(
    cm: ContactMatrix, spec: PopulationSpec, rng: np.random.Generator
) -> ContactNetwork:
    """Independent-pairs block model matching the contact matrix degrees.

    The pair probability between groups a and b is chosen so the expected
    degree of an a-node toward b equals C[a, b]: P = C[a, b] / n_b for cross
    blocks (averaged with the reverse direction, which coincides with it for
    reporting-consistent data) and P = C[a, a] / (n_a - 1) within a group.
    Within-block degrees are then Binomial -> Poisson(C[a, b]) for large n.
    """
    ages = assign_node_ages(spec)
    group_idx = [np.flatnonzero(ages == a) for a in range(N_AGE)]
    sizes = np.array([len(g) for g in group_idx])

    edges_i, edges_j, edges_tau = [], [], []
    for a in range(N_AGE):
        for b in range(a, N_AGE):
            n_a, n_b = sizes[a], sizes[b]
            if n_a == 0 or n_b == 0:
                continue
            if a == b:
                if n_a < 2:
                    continue
                prob = cm.C[a, a] / (n_a - 1)
                n_pairs = n_a * (n_a - 1) // 2
            else:
                terms = [cm.C[a, b] / n_b, cm.C[b, a] / n_a]
                prob = float(np.mean(terms))
                n_pairs = n_a * n_b
            if prob == 0.0:
                continue
            if prob > 1.0:
                raise BlockDensityError(
                    f"block ({a}, {b}): pair probability {prob:.3g} > 1; "
                    f"population too small for the contact rates"
                )

            m_edges = rng.binomial(n_pairs, prob)
            if m_edges == 0:
                continue
            # Uniform distinct pairs == independent Bernoulli thinning of the block.
            chosen = set()
            pairs_i = np.empty(m_edges, dtype=np.int64)
            pairs_j = np.empty(m_edges, dtype=np.int64)
            filled = 0
            while filled < m_edges:
                i = int(group_idx[a][rng.integers(n_a)])
                j = int(group_idx[b][rng.integers(n_b)])
                if i == j:
                    continue
                key = (i, j) if i < j else (j, i)
                if key in chosen:
                    continue
                chosen.add(key)
                pairs_i[filled], pairs_j[filled] = key
                filled += 1

            q = cm.duration_distribution(a, b)
            taus = rng.choice(N_DUR, size=m_edges, p=q)
            edges_i.append(pairs_i)
            edges_j.append(pairs_j)
            edges_tau.append(taus.astype(np.int8))

    if edges_i:
        ei = np.concatenate(edges_i)
        ej = np.concatenate(edges_j)
        et = np.concatenate(edges_tau)
    else:
        ei = np.empty(0, dtype=np.int64)
        ej = np.empty(0, dtype=np.int64)
        et = np.empty(0, dtype=np.int8)
    return ContactNetwork(ages, ei, ej, et, meta={"generator": "sbm"})


def write_network(network: ContactNetwork, directory, name: str) -> None:
    """Serialize as <name>.edges / <name>.ages / <name>.meta.json.

    Edge lines are `i j duration_index weight` with weights printed by repr,
    so a read-back is bit-exact.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    weights = network.weights
    with open(directory / f"{name}.edges", "w") as fh:
        for i, j, tau, w in zip(network.edge_i, network.edge_j, network.edge_tau, weights):
            fh.write(f"{i} {j} {tau} {float(w)!r}\n")
    with open(directory / f"{name}.ages", "w") as fh:
        for i, a in enumerate(network.ages):
            fh.write(f"{i} {a}\n")
    with open(directory / f"{name}.meta.json", "w") as fh:
        json.dump(network.meta, fh, indent=2, sort_keys=True, default=str)


def read_network(directory, name: str) -> ContactNetwork:
    directory = Path(directory)
    ages_rows = np.loadtxt(directory / f"{name}.ages", dtype=np.int64, ndmin=2)
    ages = np.zeros(len(ages_rows), dtype=np.int8)
    ages[ages_rows[:, 0]] = ages_rows[:, 1]

    ei, ej, et, ew = [], [], [], []
    with open(directory / f"{name}.edges") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            ei.append(int(parts[0]))
            ej.append(int(parts[1]))
            et.append(int(parts[2]))
            ew.append(float(parts[3]))
    with open(directory / f"{name}.meta.json") as fh:
        meta = json.load(fh)

    net = ContactNetwork(
        ages,
        np.array(ei, dtype=np.int64),
        np.array(ej, dtype=np.int64),
        np.array(et, dtype=np.int8),
        meta=meta,
    )
    expected = DURATION_WEIGHTS[net.edge_tau]
    if len(ew) and not np.array_equal(np.array(ew), expected):
        raise ValueError("edge weights in file disagree with duration categories")
    return net


def generate_gmm_network(
    models: FittedModels, spec: PopulationSpec, rng: np.random.Generator
) -> ContactNetwork:
    """Full mixture-network build: sample stubs, rebalance, wire."""
    ledger = sample_stub_ledger(models, spec, rng)
    ledger = rebalance_stubs(ledger, rng)
    net = wire_configuration(ledger, rng)
    net.meta["zero_direction_blocks"] = [list(b) for b in ledger.zero_direction_blocks]
    return assign_weights(net)
