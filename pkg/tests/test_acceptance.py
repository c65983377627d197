"""End-to-end acceptance checks, one test per shipping criterion.

Each test prints one PASS/FAIL line with the measured numbers, so the suite
output doubles as the acceptance report. Expensive shared artifacts (the
fitted models, generated networks, pipeline runs) come from session fixtures
in conftest or module fixtures here.
"""

from __future__ import annotations

import itertools
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from contactnet.common import N_AGE, N_DUR, spawn_rng
from contactnet.epidemic import (
    EpidemicParams,
    calibrate_tau,
    estimate_r0,
    fit_dispersion,
    gillespie_run,
    max_r0,
    run_replicates,
)
from contactnet.fidelity import (
    EmdCache,
    RefitSettings,
    data_fit_report,
    emd,
    match_error,
    self_fit_baseline,
)
from contactnet.gmm import fit_age_stratified, log_transform
from contactnet.networks import (
    ContactMatrix,
    ContactNetwork,
    PopulationSpec,
    generate_gmm_network,
    generate_sbm,
)
from contactnet.pipeline import run_pipeline
from contactnet.survey import build_ego_vectors, build_mixing_prior, parse_survey

import synthdata
from conftest import COMIX_FLAVORS, FLAVORS

DESK_N = 20_000
DESK_REALIZATIONS = 20
PROBE_SEED = 9000
EPI_SEED = 5150
TARGET_R0 = 1.5

# Every trace set produced in this module lands here so the structural-bound
# property can be asserted over all of them at the end.
_TRACE_SETS: list[tuple[str, list, ContactNetwork]] = []


def _verdict(name: str, ok: bool, detail: str) -> None:
    line = f"{name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line, flush=True)
    assert ok, line


def _register_traces(label: str, traces: list, network: ContactNetwork) -> list:
    _TRACE_SETS.append((label, traces, network))
    return traces


@pytest.fixture(scope="module")
def desk_spec(census):
    return PopulationSpec(DESK_N, census / census.sum())


# ---------------------------------------------------------------------------
# 1. Transport metric equals exhaustive enumeration
# ---------------------------------------------------------------------------


def _small_histograms(max_mass: int = 4, max_support: int = 3) -> np.ndarray:
    """All 9-bin histograms with at most max_support nonzero cells and total
    mass at most max_mass."""
    out = [np.zeros(N_AGE, dtype=np.int64)]
    for size in range(1, max_support + 1):
        for cells in itertools.combinations(range(N_AGE), size):
            for total in range(size, max_mass + 1):
                # compositions of `total` into `size` positive parts
                for cuts in itertools.combinations(range(1, total), size - 1):
                    parts = np.diff((0, *cuts, total))
                    h = np.zeros(N_AGE, dtype=np.int64)
                    h[list(cells)] = parts
                    out.append(h)
    return np.stack(out)


def _enumerated_emd(d: np.ndarray, k: np.ndarray, memo: dict) -> float:
    """Reference metric by exhaustive enumeration of integer transport plans.

    Moves min(mass_d, mass_k) unit grains one at a time; when the d side is
    the smaller one its first nonzero cell must ship next (any plan ships all
    of it eventually, order does not matter), and symmetrically for k. The
    memo is shared across calls.
    """
    total_d, total_k = int(d.sum()), int(k.sum())
    if total_d == 0 and total_k == 0:
        return 0.0

    def rec(dt: tuple, kt: tuple) -> int:
        sd, sk = sum(dt), sum(kt)
        if sd == 0 or sk == 0:
            return 0
        key = (dt, kt)
        hit = memo.get(key)
        if hit is not None:
            return hit
        best = None
        if sd <= sk:
            a = next(i for i, v in enumerate(dt) if v)
            d2 = list(dt)
            d2[a] -= 1
            d2 = tuple(d2)
            for b, v in enumerate(kt):
                if not v:
                    continue
                k2 = list(kt)
                k2[b] -= 1
                cost = abs(a - b) + rec(d2, tuple(k2))
                if best is None or cost < best:
                    best = cost
        else:
            b = next(i for i, v in enumerate(kt) if v)
            k2 = list(kt)
            k2[b] -= 1
            k2 = tuple(k2)
            for a, v in enumerate(dt):
                if not v:
                    continue
                d2 = list(dt)
                d2[a] -= 1
                cost = abs(a - b) + rec(tuple(d2), k2)
                if best is None or cost < best:
                    best = cost
        memo[key] = best
        return best

    flow = rec(tuple(int(x) for x in d), tuple(int(x) for x in k))
    cost = flow / total_d if total_d else 0.0
    diff = abs(total_d - total_k)
    if diff:
        cost += 10.0 / ((total_d + total_k) / 2.0 + 1.0) * diff
    return cost


def test_criterion_01_emd_matches_enumeration():
    t0 = time.perf_counter()
    hists = _small_histograms()
    memo: dict = {}
    worst = 0.0
    for d in hists:
        for k in hists:
            got = emd(d, k)
            want = _enumerated_emd(d, k, memo)
            worst = max(worst, abs(got - want))
            if worst > 1e-9:
                _verdict(
                    "criterion 01",
                    False,
                    f"emd({d.tolist()}, {k.tolist()}) = {got}, enumeration {want}",
                )
    elapsed = time.perf_counter() - t0
    _verdict(
        "criterion 01",
        worst <= 1e-9 and elapsed < 60.0,
        f"{len(hists) ** 2} pairs, max deviation {worst:.2e}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 2. Assignment equals permutation brute force
# ---------------------------------------------------------------------------


def test_criterion_02_assignment_matches_brute_force():
    t0 = time.perf_counter()
    rng = np.random.default_rng(PROBE_SEED)
    perms = np.array(list(itertools.permutations(range(8))))
    cache = EmdCache()
    cases = 1_000
    worst = 0.0
    ages = np.zeros(8, dtype=np.int64)
    for _ in range(cases):
        d = rng.poisson(1.2, size=(8, N_AGE)).astype(np.int64)
        k = rng.poisson(1.2, size=(8, N_AGE)).astype(np.int64)
        got = match_error(d, ages, k, ages, cache=cache).total
        costs = np.array([[cache.get(d[i], k[j]) for j in range(8)] for i in range(8)])
        want = costs[np.arange(8), perms].sum(axis=1).min()
        worst = max(worst, abs(got - want))
    elapsed = time.perf_counter() - t0
    _verdict(
        "criterion 02",
        worst <= 1e-9 and elapsed < 60.0,
        f"{cases} random 8x8 blocks, max deviation {worst:.2e}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 3. Reconstruction-error ordering at desk scale
# ---------------------------------------------------------------------------


def test_criterion_03_reconstruction_error_ordering(
    survey_arrays, gmm_models, sbm_matrices, desk_spec
):
    t0 = time.perf_counter()
    refit = RefitSettings(splits=20)
    failures = []
    lines = []
    for flavor in FLAVORS:
        _, age_hists, ages = survey_arrays[flavor]
        cache = EmdCache()
        data_means = {}
        for method, model in (("gmm", gmm_models[flavor]), ("sbm", sbm_matrices[flavor])):
            data = data_fit_report(
                method, model, desk_spec, age_hists, ages,
                PROBE_SEED, DESK_REALIZATIONS, cache=cache,
            )
            base = self_fit_baseline(
                method, model, desk_spec, 10_000,
                PROBE_SEED + 1, DESK_REALIZATIONS, refit=refit, cache=cache,
            )
            data_means[method] = data.mean
            lines.append(f"{flavor}/{method} data={data.mean:.3f} self={base.mean:.3f}")
            if not base.mean < data.mean:
                failures.append(f"{flavor}/{method}: self {base.mean:.3f} >= data {data.mean:.3f}")
        if flavor in COMIX_FLAVORS and not data_means["gmm"] < data_means["sbm"]:
            failures.append(
                f"{flavor}: gmm {data_means['gmm']:.3f} >= sbm {data_means['sbm']:.3f}"
            )
    elapsed = time.perf_counter() - t0
    detail = "; ".join(lines) + f", {elapsed:.0f}s"
    if failures:
        detail = "; ".join(failures) + f", {elapsed:.0f}s"
    _verdict("criterion 03", not failures and elapsed < 1800.0, detail)


@pytest.mark.skipif(
    "CONTACTNET_COMIX_DIR" not in os.environ,
    reason="paper-scale check needs real survey data: set CONTACTNET_COMIX_DIR "
    "to a directory with reopen_participants.csv and reopen_contacts.csv",
)
def test_criterion_03_paper_scale_reopen(census):
    """Optional full-scale check on real survey files (n=100,000, 100 draws)."""
    data_dir = Path(os.environ["CONTACTNET_COMIX_DIR"])
    records, report = parse_survey(
        data_dir / "reopen_participants.csv", data_dir / "reopen_contacts.csv"
    )
    prior = build_mixing_prior(records, report)
    vectors = build_ego_vectors(records, prior, seed=PROBE_SEED, report=report)
    hists = np.stack([v.counts for v in vectors])
    ages = np.array([v.owner_age for v in vectors], dtype=np.int64)
    by_age = {
        a: log_transform(hists[ages == a].astype(float))
        for a in range(N_AGE)
        if (ages == a).any()
    }
    fitted = fit_age_stratified(by_age, 404, splits=100)
    spec = PopulationSpec(100_000, census / census.sum())
    age_hists = hists.reshape(-1, N_AGE, N_DUR).sum(axis=2)
    result = data_fit_report(
        "gmm", fitted, spec, age_hists, ages, PROBE_SEED, realizations=100
    )
    _verdict(
        "criterion 03 (paper scale)",
        abs(result.mean - 0.91) <= 0.15,
        f"gmm reopen mean {result.mean:.3f} vs 0.91 +/- 0.15",
    )


# ---------------------------------------------------------------------------
# 4. Block-model degrees are Poisson
# ---------------------------------------------------------------------------


def test_criterion_04_sbm_block_degrees_are_poisson():
    t0 = time.perf_counter()
    rng = np.random.default_rng(PROBE_SEED)
    base = rng.uniform(0.4, 2.6, size=(N_AGE, N_AGE))
    C = (base + base.T) / 2.0  # symmetric rates with equal group sizes
    dur = np.full(N_DUR, 1.0 / N_DUR)
    cm = ContactMatrix(
        C=C,
        C_tau=C[:, :, None] * dur[None, None, :],
        respondents=np.full(N_AGE, 100, dtype=np.int64),
    )
    spec = PopulationSpec(10_000, np.full(N_AGE, 1.0 / N_AGE))
    net = generate_sbm(cm, spec, spawn_rng(PROBE_SEED, 4))

    # Per-node neighbor counts toward each group.
    per_group = np.zeros((net.n, N_AGE), dtype=np.int64)
    np.add.at(per_group, (net.edge_i, net.ages[net.edge_j]), 1)
    np.add.at(per_group, (net.edge_j, net.ages[net.edge_i]), 1)

    passed = 0
    total = 0
    for a in range(N_AGE):
        rows = per_group[net.ages == a]
        for b in range(N_AGE):
            lam = C[a, b]
            # Fold the far tail into the last pmf entry, then group adjacent
            # degree values until every expected count reaches 5.
            upper = int(stats.poisson.ppf(0.9999, lam)) + 1
            pmf = stats.poisson.pmf(np.arange(upper + 1), lam)
            pmf[-1] += stats.poisson.sf(upper, lam)
            sample = np.minimum(rows[:, b], upper)
            observed = np.bincount(sample, minlength=upper + 1)
            expected = pmf * len(sample)
            groups = []
            start, acc = 0, 0.0
            for v in range(upper + 1):
                acc += expected[v]
                if acc >= 5.0:
                    groups.append((start, v + 1))
                    start, acc = v + 1, 0.0
            if start <= upper and groups:
                groups[-1] = (groups[-1][0], upper + 1)
            obs_g = np.array([observed[s:e].sum() for s, e in groups])
            exp_g = np.array([expected[s:e].sum() for s, e in groups])
            if len(groups) < 2:
                continue
            chi2 = float(((obs_g - exp_g) ** 2 / exp_g).sum())
            p_value = stats.chi2.sf(chi2, df=len(groups) - 1)
            total += 1
            passed += p_value >= 0.01
    elapsed = time.perf_counter() - t0
    _verdict(
        "criterion 04",
        passed >= 0.95 * total and elapsed < 300.0,
        f"{passed}/{total} blocks pass chi-square at alpha=0.01, {elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# 5. Final size on a clique matches the closed-form fixed point
# ---------------------------------------------------------------------------


def _clique(n: int) -> ContactNetwork:
    i, j = np.triu_indices(n, 1)
    return ContactNetwork(
        ages=np.zeros(n, dtype=np.int8),
        edge_i=i.astype(np.int64),
        edge_j=j.astype(np.int64),
        edge_tau=np.full(i.shape[0], N_DUR - 1, dtype=np.int8),
        meta={"generator": "clique"},
    )


def test_criterion_05_clique_final_size():
    t0 = time.perf_counter()
    n = 2_000
    gamma_inv = 4.0
    r0 = 2.0
    net = _clique(n)
    params = EpidemicParams(
        tau=r0 / ((n - 1) * gamma_inv), gamma_inv=gamma_inv,
        use_duration_weights=False,
    )
    # R∞ = 1 - exp(-2 R∞) has its nonzero fixed point at 0.7968...
    target = 0.7968121300200202
    fractions = []
    traces = []
    batch = 0
    while sum(f >= 0.01 for f in fractions) < 200 and batch < 10:
        new = run_replicates(net, params, EPI_SEED, 64, stream=(60, batch))
        traces.extend(new)
        fractions.extend(t.r_end / t.n for t in new)
        batch += 1
    _register_traces("clique final size", traces, net)
    big = [f for f in fractions if f >= 0.01][:200]
    mean = float(np.mean(big))
    elapsed = time.perf_counter() - t0
    _verdict(
        "criterion 05",
        len(big) == 200 and abs(mean - target) <= 0.03 and elapsed < 600.0,
        f"mean final size {mean:.4f} over {len(big)} non-extinct runs "
        f"vs {target:.4f} +/- 0.03, {elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# 6. Latent-period transit moments
# ---------------------------------------------------------------------------


def test_criterion_06_latent_transit_moments():
    t0 = time.perf_counter()
    n = 500
    net = _clique(n)
    params = EpidemicParams(
        tau=20.0 / ((n - 1) * 4.0), sigma_inv=3.0, use_duration_weights=False
    )
    transits = []
    traces = []
    rep = 0
    while sum(len(t) for t in transits) < 10_000:
        trace = gillespie_run(net, params, spawn_rng(EPI_SEED, 6, rep))
        traces.append(trace)
        transits.append(trace.latent_transits())
        rep += 1
    _register_traces("latent transits", traces, net)
    sample = np.concatenate(transits)[:10_000]
    mean = float(sample.mean())
    var = float(sample.var(ddof=1))
    elapsed = time.perf_counter() - t0
    _verdict(
        "criterion 06",
        abs(mean - 3.0) <= 0.05 and abs(var - 3.0) <= 0.3 and elapsed < 120.0,
        f"mean {mean:.3f} vs 3.0 +/- 0.05, variance {var:.3f} vs 3.0 +/- 0.3, "
        f"{len(sample)} transits, {elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# 7 and 8. Offspring dispersion: recovery, level, and ordering
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_networks(gmm_models, sbm_matrices, desk_spec):
    """flavor -> {method: network} at desk scale for the dispersion checks."""
    nets = {}
    for idx, flavor in enumerate(COMIX_FLAVORS):
        nets[flavor] = {
            "gmm": generate_gmm_network(
                gmm_models[flavor], desk_spec, spawn_rng(PROBE_SEED, 70, idx)
            ),
            "sbm": generate_sbm(
                sbm_matrices[flavor], desk_spec, spawn_rng(PROBE_SEED, 71, idx)
            ),
        }
    return nets


def _dispersion_at_target(label, network, use_duration_weights, seed):
    """Calibrate tau to the shared R0 target, then pool generation-2
    offspring counts until the NB fit has a solid sample."""
    cal = calibrate_tau(
        network, TARGET_R0, seed,
        use_duration_weights=use_duration_weights, replicates=24,
    )
    assert not cal.unreachable, f"{label}: R0 {TARGET_R0} unreachable"
    params = EpidemicParams(tau=cal.tau, use_duration_weights=use_duration_weights)
    secondary = []
    traces = []
    batch = 0
    while sum(len(s) for s in secondary) < 1_200 and batch < 10:
        new = run_replicates(
            network, params, seed, 50, stream=(61, batch), early_stop_generation=3
        )
        traces.extend(new)
        secondary.extend(t.secondary_cases(2) for t in new)
        batch += 1
    _register_traces(label, traces, network)
    pooled = np.concatenate(secondary)
    fit = fit_dispersion(pooled, spawn_rng(seed, 99))
    return cal, fit, pooled.size


def test_criterion_07_dispersion_recovery_and_reopen_band(desk_networks):
    t0 = time.perf_counter()
    rng = np.random.default_rng(PROBE_SEED)
    k_true, mean_true = 0.5, 1.5
    draws = rng.negative_binomial(k_true, k_true / (k_true + mean_true), size=10_000)
    synthetic = fit_dispersion(draws, spawn_rng(PROBE_SEED, 7))
    recovery_ok = abs(synthetic.k - k_true) <= 0.1 * k_true

    cal, fit, m = _dispersion_at_target(
        "reopen gmm duration-weighted", desk_networks["reopen"]["gmm"], True,
        spawn_rng(EPI_SEED, 7, 0).integers(2**62),
    )
    band_ok = 0.3 <= fit.k <= 0.9
    elapsed = time.perf_counter() - t0
    _verdict(
        "criterion 07",
        recovery_ok and band_ok and elapsed < 1800.0,
        f"synthetic k {synthetic.k:.3f} vs 0.5 +/- 10%; reopen k {fit.k:.3f} "
        f"in [0.3, 0.9] at R0 {cal.r0:.2f} ({m} offspring counts), {elapsed:.0f}s",
    )


def test_criterion_08_dispersion_ordering(desk_networks):
    t0 = time.perf_counter()
    failures = []
    lines = []
    for idx, flavor in enumerate(COMIX_FLAVORS):
        ks = {}
        for variant, (method, use_dur) in enumerate(
            (("sbm", True), ("gmm", True), ("gmm", False))
        ):
            label = f"{flavor} {method} {'dur' if use_dur else 'nodur'}"
            seed = int(spawn_rng(EPI_SEED, 8, idx, variant).integers(2**62))
            _, fit, _ = _dispersion_at_target(
                label, desk_networks[flavor][method], use_dur, seed
            )
            ks[(method, use_dur)] = fit.k
        k_sbm = ks[("sbm", True)]
        k_dur = ks[("gmm", True)]
        k_nodur = ks[("gmm", False)]
        lines.append(
            f"{flavor}: sbm {k_sbm:.2f} > gmm+dur {k_dur:.2f} > gmm {k_nodur:.2f}"
        )
        if not (k_sbm > k_dur > k_nodur):
            failures.append(lines[-1])
    elapsed = time.perf_counter() - t0
    detail = "; ".join(failures if failures else lines) + f", {elapsed:.0f}s"
    _verdict("criterion 08", not failures, detail)


# ---------------------------------------------------------------------------
# 9 and 10. Structural bound, sweep flags, and determinism
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory, census):
    """Shared pipeline invocations: the full command twice on one lockdown
    snapshot (determinism) and the sweep command on the other (flag checks)."""
    root = tmp_path_factory.mktemp("pipeline")
    run_dirs = {}
    for flavor in ("lockdown2020", "lockdown2021"):
        parts, conts = synthdata.write_survey(root / "data", flavor, 600, 2026)
        config = {
            "label": flavor,
            "seed": 77,
            "participants": str(parts),
            "contacts": str(conts),
            "population": {"age_proportions": census.tolist()},
            "generator": {"method": "sbm"},
            "fit": {"splits": 20},
            "simulate": {"target_r0": 1.5},
            "sweep": {"r0_targets": [1.5, 2.5, 3.0, 3.5]},
        }
        config_path = root / f"{flavor}.json"
        config_path.write_text(json.dumps(config))
        if flavor == "lockdown2020":
            run_dirs["first"] = run_pipeline(
                config_path, "all", profile="desk", out_root=root / "r1"
            )
            run_dirs["second"] = run_pipeline(
                config_path, "all", profile="desk", out_root=root / "r2"
            )
        else:
            run_dirs["other_sweep"] = run_pipeline(
                config_path, "sweep", profile="desk", out_root=root / "r3"
            )
    return run_dirs


def _sweep_rows(run_dir: Path) -> list[dict]:
    import csv

    with open(run_dir / "tables" / "sweep.csv") as fh:
        return list(csv.DictReader(fh))


def test_criterion_09_structural_bound_and_sweep_flags(pipeline_runs):
    bound_checked = 0
    failures = []
    for label, traces, network in _TRACE_SETS:
        r0 = estimate_r0(traces)
        ceiling = max_r0(traces, network)
        if math.isnan(r0) or math.isnan(ceiling):
            continue
        bound_checked += 1
        if r0 > ceiling + 1e-9:
            failures.append(f"{label}: estimate {r0:.3f} > ceiling {ceiling:.3f}")

    flag_lines = []
    for key in ("first", "other_sweep"):
        rows = _sweep_rows(pipeline_runs[key])
        for row in rows:
            target = float(row["target_r0"] or "nan")
            pooled = float(row["pooled_r0"] or "nan")
            ceiling = float(row["max_r0"] or "nan")
            flagged = row["unreachable"] == "True"
            if not math.isnan(pooled) and not math.isnan(ceiling):
                bound_checked += 1
                if pooled > ceiling + 1e-9:
                    failures.append(f"sweep {key} target {target}: {pooled} > {ceiling}")
            if target >= 3.0 and not flagged:
                failures.append(f"sweep {key}: target {target} not flagged unreachable")
            if target >= 3.0 and flagged:
                flag_lines.append(f"{key}@{target} flagged")
    detail = (
        f"{bound_checked} trace sets respect the bound; "
        + "; ".join(failures if failures else flag_lines)
    )
    _verdict("criterion 09", not failures and bound_checked > 0, detail)


def test_criterion_10_determinism(pipeline_runs):
    t0 = time.perf_counter()
    first, second = pipeline_runs["first"], pipeline_runs["second"]
    names_first = sorted(p.name for p in (first / "tables").glob("*.csv"))
    names_second = sorted(p.name for p in (second / "tables").glob("*.csv"))
    mismatches = []
    if names_first != names_second:
        mismatches.append(f"table sets differ: {names_first} vs {names_second}")
    for name in names_first:
        if (first / "tables" / name).read_bytes() != (second / "tables" / name).read_bytes():
            mismatches.append(f"{name} differs between runs")
    elapsed = time.perf_counter() - t0
    _verdict(
        "criterion 10",
        not mismatches and names_first,
        f"{len(names_first)} CSV artifacts byte-identical across reruns "
        f"({', '.join(names_first)}), compare {elapsed:.1f}s",
    )
