"""Stochastic SEIR epidemics on weighted contact networks.

The simulator is an exact event-driven (Gillespie) implementation. Each
susceptible node i feels a force of infection

    lambda_i = tau * sum of D_ij over currently infectious neighbors j,

where D_ij is the edge's duration weight (or 1 when duration weighting is
off). Exposed individuals pass through three sequential latent stages, each
leaving at rate 3*sigma, so the total latent period is Erlang(3) with mean
1/sigma. Infectious individuals recover at rate gamma.

Duration weights are multiples of 1/192 (2.5 minutes out of 8 hours), so all
infection-pressure bookkeeping is done in exact integer units of 1/192. That
makes the incremental per-node hazard identical to a from-scratch recompute,
which `debug_check` asserts after every event.

Node selection for the next infection uses a flat array of integer pressures
with square-root blocking: one cumulative sum over ~n/256 block totals plus
one over a 256-wide block locates the node. Neighbor updates on I entry/exit
are vectorized, so per-event cost stays low even on cliques.

Downstream statistics (pooled R0, its structural upper bound, final size,
negative-binomial dispersion of secondary cases, and the duration/age
contribution summaries) operate on the recorded infection trees.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import gammaln

from .common import N_AGE, N_DUR, spawn_rng
from .networks import ContactNetwork

# Duration weights expressed in integer units of 1/192 of an 8-hour day:
# {2.5, 10, 37.5, 150, 480} minutes / 480 * 192 = {1, 4, 15, 60, 192}.
INT_WEIGHTS = np.array([1, 4, 15, 60, 192], dtype=np.int64)
WEIGHT_SCALE = 192.0

# Dispersion estimates beyond this are reported as infinity (Poisson limit).
K_UNBOUNDED_CAP = 1.0e6

_BLOCK_SHIFT = 8  # sampler block size 256
_BLOCK = 1 << _BLOCK_SHIFT

S, E1, E2, E3, I, R = range(6)
TRANSITION_LABELS = ("S>E1", "E1>E2", "E2>E3", "E3>I", "I>R")


@dataclass(frozen=True)
class EpidemicParams:
    """Rates for the SEIR process.

    tau is the transmission rate per unit duration weight per day. sigma_inv
    and gamma_inv are the mean latent and infectious periods in days. With
    use_duration_weights off every edge transmits with weight 1.
    """

    tau: float
    sigma_inv: float = 3.0
    gamma_inv: float = 4.0
    use_duration_weights: bool = True

    def __post_init__(self) -> None:
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")
        if self.sigma_inv <= 0 or self.gamma_inv <= 0:
            raise ValueError("latent and infectious periods must be positive")


@dataclass
class EventLog:
    """Full event history: one row per transition."""

    times: np.ndarray  # (m,) float64
    nodes: np.ndarray  # (m,) int32
    kinds: np.ndarray  # (m,) int8, index into TRANSITION_LABELS
    infectors: np.ndarray  # (m,) int32, -1 except for S>E1 rows
    counts: np.ndarray  # (m, 6) int32 compartment occupancies after the event


@dataclass
class EpidemicTrace:
    """Outcome of one simulation run."""

    n: int
    index_case: int
    t_end: float
    r_end: int
    early_stopped: bool
    generation: np.ndarray  # (n,) int32, -1 for never infected, index case 1
    infector: np.ndarray  # (n,) int32, -1 for the index case and uninfected
    trans_tau: np.ndarray  # (n,) int8 duration category of the infecting edge
    t_exposed: np.ndarray  # (n,) float64, NaN where unset
    t_infectious: np.ndarray
    t_recovered: np.ndarray
    runtime: float = 0.0
    events: EventLog | None = None

    def g_nodes(self, phi: int) -> np.ndarray:
        return np.flatnonzero(self.generation == phi)

    def g_size(self, phi: int) -> int:
        return int(np.count_nonzero(self.generation == phi))

    def offspring_counts(self) -> np.ndarray:
        """Number of direct infectees per node."""
        parents = self.infector[self.infector >= 0]
        return np.bincount(parents, minlength=self.n)

    def secondary_cases(self, phi: int = 2) -> np.ndarray:
        return self.offspring_counts()[self.g_nodes(phi)]

    def total_infected(self) -> int:
        return int(np.count_nonzero(self.generation >= 1))

    def latent_transits(self) -> np.ndarray:
        """E1-entry to I-entry intervals for everyone who completed them."""
        mask = np.isfinite(self.t_exposed) & np.isfinite(self.t_infectious)
        return self.t_infectious[mask] - self.t_exposed[mask]

    def summary(self) -> dict:
        return {
            "n": self.n,
            "index_case": self.index_case,
            "g2": self.g_size(2),
            "g3": self.g_size(3),
            "r_end": self.r_end,
            "total_infected": self.total_infected(),
            "t_end": self.t_end,
            "early_stopped": self.early_stopped,
            "runtime_s": self.runtime,
        }


def _effective_weights(network: ContactNetwork, use_duration_weights: bool):
    """CSR neighbor structure with integer edge weights."""
    offsets, neighbors, _, durations = network.adjacency_csr()
    if use_duration_weights:
        int_w = INT_WEIGHTS[durations]
    else:
        int_w = np.full(durations.shape[0], INT_WEIGHTS[-1], dtype=np.int64)
    return offsets, neighbors, int_w, durations


def seed_index_case(network: ContactNetwork, rng, use_duration_weights: bool = True) -> int:
    """Draw the index case with probability proportional to weighted degree."""
    if network.n_edges == 0:
        raise ValueError("cannot seed an epidemic on a network with no edges")
    if use_duration_weights:
        w = INT_WEIGHTS[network.edge_tau]
    else:
        w = np.full(network.n_edges, INT_WEIGHTS[-1], dtype=np.int64)
    wd = np.zeros(network.n, dtype=np.int64)
    np.add.at(wd, network.edge_i, w)
    np.add.at(wd, network.edge_j, w)
    cum = np.cumsum(wd)
    pick = rng.integers(int(cum[-1]))
    return int(np.searchsorted(cum, pick, side="right"))


def gillespie_run(
    network: ContactNetwork,
    params: EpidemicParams,
    rng,
    *,
    index_case: int | None = None,
    record_events: bool = False,
    early_stop_generation: int | None = None,
    debug_check: bool = False,
) -> EpidemicTrace:
    """Run one epidemic to completion.

    The index case starts infectious at t=0 (generation 1). With
    early_stop_generation=g the run terminates as soon as no node of
    generation <= g is still exposed or infectious; generation sizes up to
    g+1 and the offspring counts of generations <= g are final at that
    point, which is what R0 and dispersion estimation need, but r_end only
    counts recoveries that happened before the stop.
    """
    start = time.perf_counter()
    n = network.n
    offsets, neighbors, int_w, durations = _effective_weights(
        network, params.use_duration_weights
    )

    if index_case is None:
        index_case = seed_index_case(network, rng, params.use_duration_weights)
    elif not 0 <= index_case < n:
        raise ValueError(f"index case {index_case} out of range")

    state = np.full(n, S, dtype=np.int8)
    generation = np.full(n, -1, dtype=np.int32)
    infector = np.full(n, -1, dtype=np.int32)
    trans_tau = np.full(n, -1, dtype=np.int8)
    t_exposed = np.full(n, np.nan)
    t_infectious = np.full(n, np.nan)
    t_recovered = np.full(n, np.nan)

    # Integer infection pressure per susceptible node, with block subtotals.
    n_blocks = (n + _BLOCK - 1) >> _BLOCK_SHIFT
    pressure = np.zeros(n, dtype=np.int64)
    block_sum = np.zeros(n_blocks, dtype=np.int64)
    total_pressure = 0

    e1: list[int] = []
    e2: list[int] = []
    e3: list[int] = []
    inf_list: list[int] = []

    tau_eff = params.tau / WEIGHT_SCALE
    stage_rate = 3.0 / params.sigma_inv
    rec_rate = 1.0 / params.gamma_inv

    esg = early_stop_generation
    if esg is not None and esg < 1:
        raise ValueError("early_stop_generation must be at least 1")
    active_low = 0

    if record_events:
        ev_t: list[float] = []
        ev_node: list[int] = []
        ev_kind: list[int] = []
        ev_inf: list[int] = []
        ev_counts: list[tuple] = []
    comp = [n, 0, 0, 0, 0, 0]

    def shift_pressure(node: int, sign: int) -> None:
        """Add or remove node's edge weights from susceptible neighbors."""
        nonlocal total_pressure
        lo, hi = offsets[node], offsets[node + 1]
        nb = neighbors[lo:hi]
        mask = state[nb] == S
        if not mask.any():
            return
        nb = nb[mask]
        w = int_w[lo:hi][mask]
        if sign < 0:
            w = -w
        pressure[nb] += w
        np.add.at(block_sum, nb >> _BLOCK_SHIFT, w)
        total_pressure += int(w.sum())

    # Seed: index case enters I directly.
    state[index_case] = I
    generation[index_case] = 1
    t_infectious[index_case] = 0.0
    inf_list.append(index_case)
    comp[S] -= 1
    comp[I] += 1
    if esg is not None:
        active_low = 1
    shift_pressure(index_case, +1)

    t = 0.0
    early_stopped = False
    while True:
        n_e1, n_e2, n_e3, n_i = len(e1), len(e2), len(e3), len(inf_list)
        if n_e1 + n_e2 + n_e3 + n_i == 0:
            break
        if esg is not None and active_low == 0:
            early_stopped = True
            break

        r_inf = tau_eff * total_pressure
        r1 = stage_rate * n_e1
        r2 = stage_rate * n_e2
        r3 = stage_rate * n_e3
        r4 = rec_rate * n_i
        total_rate = r_inf + r1 + r2 + r3 + r4

        t += rng.exponential() / total_rate
        u = rng.random() * total_rate

        if u < r_inf:
            # Locate the infectee by exact integer pressure.
            pick = rng.integers(total_pressure)
            bc = np.cumsum(block_sum)
            b = int(np.searchsorted(bc, pick, side="right"))
            base = int(bc[b - 1]) if b else 0
            seg = pressure[b << _BLOCK_SHIFT : (b + 1) << _BLOCK_SHIFT]
            node = (b << _BLOCK_SHIFT) + int(
                np.searchsorted(np.cumsum(seg), pick - base, side="right")
            )

            # Attribute the infector among infectious neighbors, odds D_ij.
            lo, hi = offsets[node], offsets[node + 1]
            nb = neighbors[lo:hi]
            imask = state[nb] == I
            iw = int_w[lo:hi][imask]
            cw = np.cumsum(iw)
            j = int(np.searchsorted(cw, rng.integers(int(cw[-1])), side="right"))
            src = int(nb[imask][j])
            infector[node] = src
            trans_tau[node] = durations[lo:hi][imask][j]

            p = int(pressure[node])
            pressure[node] = 0
            block_sum[node >> _BLOCK_SHIFT] -= p
            total_pressure -= p

            state[node] = E1
            generation[node] = generation[src] + 1
            t_exposed[node] = t
            e1.append(node)
            comp[S] -= 1
            comp[E1] += 1
            if esg is not None and generation[node] <= esg:
                active_low += 1
            kind = 0
        elif u < r_inf + r1:
            k = int(rng.integers(n_e1))
            node = e1[k]
            e1[k] = e1[-1]
            e1.pop()
            state[node] = E2
            e2.append(node)
            comp[E1] -= 1
            comp[E2] += 1
            kind = 1
        elif u < r_inf + r1 + r2:
            k = int(rng.integers(n_e2))
            node = e2[k]
            e2[k] = e2[-1]
            e2.pop()
            state[node] = E3
            e3.append(node)
            comp[E2] -= 1
            comp[E3] += 1
            kind = 2
        elif u < r_inf + r1 + r2 + r3:
            k = int(rng.integers(n_e3))
            node = e3[k]
            e3[k] = e3[-1]
            e3.pop()
            state[node] = I
            t_infectious[node] = t
            inf_list.append(node)
            comp[E3] -= 1
            comp[I] += 1
            shift_pressure(node, +1)
            kind = 3
        else:
            k = int(rng.integers(n_i))
            node = inf_list[k]
            inf_list[k] = inf_list[-1]
            inf_list.pop()
            state[node] = R
            t_recovered[node] = t
            comp[I] -= 1
            comp[R] += 1
            shift_pressure(node, -1)
            if esg is not None and generation[node] <= esg:
                active_low -= 1
            kind = 4

        if record_events:
            ev_t.append(t)
            ev_node.append(node)
            ev_kind.append(kind)
            ev_inf.append(int(infector[node]) if kind == 0 else -1)
            ev_counts.append(tuple(comp))

        if debug_check:
            _assert_pressure_consistent(
                state, offsets, neighbors, int_w, pressure, block_sum, total_pressure
            )

    events = None
    if record_events:
        events = EventLog(
            times=np.array(ev_t),
            nodes=np.array(ev_node, dtype=np.int32),
            kinds=np.array(ev_kind, dtype=np.int8),
            infectors=np.array(ev_inf, dtype=np.int32),
            counts=np.array(ev_counts, dtype=np.int32).reshape(-1, 6),
        )

    return EpidemicTrace(
        n=n,
        index_case=index_case,
        t_end=t,
        r_end=int(np.count_nonzero(state == R)),
        early_stopped=early_stopped,
        generation=generation,
        infector=infector,
        trans_tau=trans_tau,
        t_exposed=t_exposed,
        t_infectious=t_infectious,
        t_recovered=t_recovered,
        runtime=time.perf_counter() - start,
        events=events,
    )


def _assert_pressure_consistent(
    state, offsets, neighbors, int_w, pressure, block_sum, total_pressure
) -> None:
    n = state.shape[0]
    expected = np.zeros(n, dtype=np.int64)
    for j in np.flatnonzero(state == I):
        lo, hi = offsets[j], offsets[j + 1]
        nb = neighbors[lo:hi]
        mask = state[nb] == S
        expected[nb[mask]] += int_w[lo:hi][mask]
    if not np.array_equal(expected, pressure):
        raise AssertionError("incremental infection pressure drifted")
    n_blocks = block_sum.shape[0]
    blocks = np.zeros(n_blocks, dtype=np.int64)
    np.add.at(blocks, np.arange(n) >> _BLOCK_SHIFT, pressure)
    if not np.array_equal(blocks, block_sum) or int(pressure.sum()) != total_pressure:
        raise AssertionError("sampler block totals drifted")


def run_replicates(
    network: ContactNetwork,
    params: EpidemicParams,
    seed: int,
    replicates: int,
    *,
    stream: tuple[int, ...] = (60,),
    **run_kwargs,
) -> list[EpidemicTrace]:
    """Independent replicate runs with per-replicate seed streams.

    Each replicate r uses its own generator derived from (seed, *stream, r),
    so results do not depend on execution order and the list is identical
    whether replicates run serially or in parallel.
    """
    return [
        gillespie_run(network, params, spawn_rng(seed, *stream, r), **run_kwargs)
        for r in range(replicates)
    ]


# ---------------------------------------------------------------------------
# Statistics on traces
# ---------------------------------------------------------------------------


def estimate_r0(traces: list[EpidemicTrace]) -> float:
    """Pooled ratio of generation-3 to generation-2 case counts.

    Returns NaN when no run produced a second generation.
    """
    g2 = sum(t.g_size(2) for t in traces)
    g3 = sum(t.g_size(3) for t in traces)
    if g2 == 0:
        return math.nan
    return g3 / g2


def max_r0(traces, network: ContactNetwork) -> float:
    """Structural ceiling: mean unweighted degree of generation-2 cases, minus one.

    Accepts one trace or a list; g2 membership is pooled across traces.
    Returns NaN when there are no generation-2 cases at all.
    """
    if isinstance(traces, EpidemicTrace):
        traces = [traces]
    deg = network.degrees()
    total = 0
    count = 0
    for t in traces:
        nodes = t.g_nodes(2)
        total += int(deg[nodes].sum())
        count += nodes.shape[0]
    if count == 0:
        return math.nan
    return total / count - 1.0


def final_size(
    traces: list[EpidemicTrace],
    r0: float,
    *,
    min_outbreak: float = 0.01,
) -> float:
    """Mean recovered fraction over non-extinct runs, or 0 when r0 < 1.

    Runs with a final recovered fraction under min_outbreak are treated as
    stochastic die-outs and excluded from the average.
    """
    if not (r0 >= 1.0):  # also catches NaN
        return 0.0
    fractions = [t.r_end / t.n for t in traces]
    kept = [f for f in fractions if f >= min_outbreak]
    if not kept:
        return 0.0
    return float(np.mean(kept))


@dataclass(frozen=True)
class DispersionFit:
    """Negative-binomial fit to a secondary-case sample."""

    mean: float
    k: float  # math.inf when the Poisson limit is preferred
    ci: tuple[float, float]
    unbounded: bool
    sample_size: int

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "k": self.k,
            "k_lo": self.ci[0],
            "k_hi": self.ci[1],
            "unbounded": self.unbounded,
            "sample_size": self.sample_size,
        }


def _nb_fit_k(values: np.ndarray, counts: np.ndarray, n: int, m: float) -> float:
    """Profile MLE for the dispersion k with the mean fixed at m.

    The sample is given in compressed form: counts[i] occurrences of
    values[i]. Returns inf when the sample shows no excess variance.
    """
    if m <= 0:
        return math.inf
    ex2 = float(counts @ (values.astype(float) ** 2)) / n
    var = (ex2 - m * m) * n / (n - 1) if n > 1 else 0.0
    if var <= m:
        return math.inf
    sum_x = n * m

    def neg_ll(log_k: float) -> float:
        k = math.exp(log_k)
        ll = float(counts @ gammaln(values + k)) - n * gammaln(k)
        ll += n * k * math.log(k / (k + m)) + sum_x * math.log(m / (k + m))
        return -ll

    res = minimize_scalar(
        neg_ll,
        bounds=(math.log(1e-8), math.log(1e8)),
        method="bounded",
        options={"xatol": 1e-10},
    )
    k_hat = math.exp(res.x)
    return math.inf if k_hat > K_UNBOUNDED_CAP else k_hat


def fit_dispersion(secondary_cases, rng, n_boot: int = 100) -> DispersionFit:
    """Fit NB(mean, k) to offspring counts; 95% CI by bootstrap.

    The mean is profiled to the sample mean and k maximizes the remaining
    one-dimensional likelihood. Samples whose variance does not exceed the
    mean get the infinity sentinel (the fit degenerates to Poisson). The
    percentile bootstrap interval is widened, if needed, to include the
    point estimate.
    """
    x = np.asarray(list(secondary_cases), dtype=np.int64)
    if x.size == 0:
        raise ValueError("secondary case sample is empty")
    if (x < 0).any():
        raise ValueError("secondary case counts must be nonnegative")
    n = x.size
    counts = np.bincount(x)
    values = np.arange(counts.shape[0], dtype=np.int64)
    m = float(x.mean())
    k_hat = _nb_fit_k(values, counts, n, m)

    probs = counts / n
    boot = np.empty(n_boot)
    for b in range(n_boot):
        counts_b = rng.multinomial(n, probs)
        m_b = float(counts_b @ values) / n
        boot[b] = _nb_fit_k(values, counts_b, n, m_b)
    # Order statistics without interpolation: lerp between two infinite
    # resamples would produce NaN. Rounding outward keeps the interval valid.
    lo = float(np.percentile(boot, 2.5, method="lower"))
    hi = float(np.percentile(boot, 97.5, method="higher"))
    lo = min(lo, k_hat)
    hi = max(hi, k_hat)
    return DispersionFit(
        mean=m,
        k=k_hat,
        ci=(lo, hi),
        unbounded=not math.isfinite(k_hat),
        sample_size=n,
    )


# ---------------------------------------------------------------------------
# Contribution summaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContributionReport:
    """Which link durations and age groups drive early transmission.

    Either share vector is None when no qualifying transmission events
    exist; otherwise each sums to 1.
    """

    duration_share: np.ndarray | None
    age_share: np.ndarray | None
    transmissions: int


def duration_contribution(
    traces: list[EpidemicTrace], generations: tuple[int, ...] = (2,)
) -> np.ndarray | None:
    """Share of qualifying transmissions per duration category.

    A transmission qualifies when the infectee's generation is in
    `generations` (the edge category was recorded at infection time).
    """
    counts = np.zeros(N_DUR, dtype=np.int64)
    for t in traces:
        mask = np.isin(t.generation, generations) & (t.trans_tau >= 0)
        counts += np.bincount(t.trans_tau[mask], minlength=N_DUR)
    total = int(counts.sum())
    if total == 0:
        return None
    return counts / total


def leading_eigenvector(
    matrix: np.ndarray, tol: float = 1e-14, max_iter: int = 10000
) -> np.ndarray:
    """Power iteration on a nonnegative square matrix, normalized to sum 1.

    Starts from the uniform vector; iterates stay nonnegative so the sum is
    a valid norm. If the image collapses to zero (nilpotent case) the last
    nonzero iterate is returned.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("matrix must be square")
    if (m < 0).any():
        raise ValueError("matrix must be nonnegative")
    if m.sum() == 0:
        raise ValueError("matrix is identically zero")
    v = np.full(m.shape[0], 1.0 / m.shape[0])
    for _ in range(max_iter):
        nxt = m @ v
        s = nxt.sum()
        if s == 0:
            return v
        nxt /= s
        if np.abs(nxt - v).max() < tol:
            return nxt
        v = nxt
    return v


def age_contribution(
    traces: list[EpidemicTrace],
    ages: np.ndarray,
    generations: tuple[int, ...] = (2,),
) -> np.ndarray | None:
    """Leading eigenvector of the infector-age by infectee-age count matrix.

    The matrix pools transmissions whose infectees fall in `generations`.
    Returns None when there are no such events.
    """
    m = np.zeros((N_AGE, N_AGE))
    for t in traces:
        mask = np.isin(t.generation, generations) & (t.infector >= 0)
        infectees = np.flatnonzero(mask)
        if infectees.size == 0:
            continue
        infectors = t.infector[infectees]
        np.add.at(m, (ages[infectors], ages[infectees]), 1.0)
    if m.sum() == 0:
        return None
    return leading_eigenvector(m)


def contribution_report(
    traces: list[EpidemicTrace],
    network: ContactNetwork,
    generations: tuple[int, ...] = (2,),
) -> ContributionReport:
    dur = duration_contribution(traces, generations)
    age = age_contribution(traces, network.ages.astype(np.int64), generations)
    transmissions = sum(
        int((np.isin(t.generation, generations) & (t.infector >= 0)).sum())
        for t in traces
    )
    return ContributionReport(
        duration_share=dur, age_share=age, transmissions=transmissions
    )


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationResult:
    """Outcome of searching tau for a target pooled R0."""

    tau: float
    r0: float
    target: float
    unreachable: bool
    max_r0: float
    evaluations: list = field(default_factory=list)  # (tau, r0) pairs
    replicates: int = 48


def calibrate_tau(
    network: ContactNetwork,
    target_r0: float,
    seed: int,
    *,
    use_duration_weights: bool = True,
    sigma_inv: float = 3.0,
    gamma_inv: float = 4.0,
    replicates: int = 48,
    tol: float = 0.05,
    max_doublings: int = 24,
    max_evaluations: int = 40,
) -> CalibrationResult:
    """Bisection on tau so that pooled R0 over replicate runs hits the target.

    Each evaluation runs `replicates` early-stopped simulations on fresh seed
    streams. If doubling tau max_doublings times never brings R0 up to the
    target, the target sits above the network's structural ceiling and the
    result is flagged unreachable (with the best tau found).
    """
    if target_r0 <= 0:
        raise ValueError("target R0 must be positive")
    if network.n_edges == 0:
        return CalibrationResult(
            tau=0.0, r0=0.0, target=target_r0, unreachable=True, max_r0=0.0,
            replicates=replicates,
        )

    evaluations: list[tuple[float, float]] = []
    best_max_r0 = -math.inf
    eval_idx = 0

    def measure(tau: float) -> float:
        nonlocal eval_idx, best_max_r0
        params = EpidemicParams(
            tau=tau,
            sigma_inv=sigma_inv,
            gamma_inv=gamma_inv,
            use_duration_weights=use_duration_weights,
        )
        traces = [
            gillespie_run(
                network,
                params,
                spawn_rng(seed, 50, eval_idx, r),
                early_stop_generation=2,
            )
            for r in range(replicates)
        ]
        eval_idx += 1
        r0 = estimate_r0(traces)
        ceiling = max_r0(traces, network)
        if math.isfinite(ceiling):
            best_max_r0 = max(best_max_r0, ceiling)
        r0 = 0.0 if math.isnan(r0) else r0
        evaluations.append((tau, r0))
        return r0

    def result(tau: float, r0: float, unreachable: bool) -> CalibrationResult:
        ceiling = best_max_r0 if math.isfinite(best_max_r0) else math.nan
        return CalibrationResult(
            tau=tau,
            r0=r0,
            target=target_r0,
            unreachable=unreachable,
            max_r0=ceiling,
            evaluations=evaluations,
            replicates=replicates,
        )

    if use_duration_weights:
        mean_wd = 2.0 * float(INT_WEIGHTS[network.edge_tau].sum()) / WEIGHT_SCALE
    else:
        mean_wd = 2.0 * network.n_edges
    mean_wd /= network.n

    hi = target_r0 / (gamma_inv * mean_wd)
    r0_hi = measure(hi)
    if abs(r0_hi - target_r0) <= tol:
        return result(hi, r0_hi, False)

    if r0_hi < target_r0:
        lo, r0_lo = hi, r0_hi
        reached = False
        for _ in range(max_doublings):
            hi *= 2.0
            r0_hi = measure(hi)
            if abs(r0_hi - target_r0) <= tol:
                return result(hi, r0_hi, False)
            if r0_hi >= target_r0:
                reached = True
                break
            lo, r0_lo = hi, r0_hi
        if not reached:
            return result(hi, r0_hi, True)
    else:
        lo, r0_lo = hi, r0_hi
        for _ in range(max_doublings):
            hi, r0_hi = lo, r0_lo
            lo /= 2.0
            r0_lo = measure(lo)
            if abs(r0_lo - target_r0) <= tol:
                return result(lo, r0_lo, False)
            if r0_lo < target_r0:
                break
        else:
            # R0 stayed above target even at vanishing tau; give up at lo.
            return result(lo, r0_lo, False)

    while len(evaluations) < max_evaluations:
        mid = 0.5 * (lo + hi)
        r0_mid = measure(mid)
        if abs(r0_mid - target_r0) <= tol:
            return result(mid, r0_mid, False)
        if r0_mid < target_r0:
            lo = mid
        else:
            hi = mid

    # Tolerance not met within budget; report the closest evaluation.
    tau_best, r0_best = min(evaluations, key=lambda e: abs(e[1] - target_r0))
    return result(tau_best, r0_best, False)
