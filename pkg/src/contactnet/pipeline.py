"""End-to-end orchestration: config, stages, run directories, manifests.

A run is driven by a single JSON config validated against a fixed schema
(unknown keys are errors, so typos fail loudly). Each invocation creates
`runs/<timestamp>-<confighash>/` containing `manifest.json`, `tables/*.csv`
and `networks/*` artifacts. Everything stochastic descends from the single
master seed through named substreams, and tables never embed wall-clock
values, so two runs with the same config and seed produce byte-identical
CSV files. Timings and timestamps live only in the manifest.

Stages: ingest -> fit -> generate -> fidelity / simulate / sweep. A cached
network (`network_file`) or model fit (`models_file`) satisfies the
corresponding dependency, letting e.g. a simulate-only config skip straight
to the epidemic runs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from datetime import datetime
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .common import AGE_LABELS, DURATION_LABELS, N_AGE, N_DUR, spawn_rng
from .epidemic import (
    EpidemicParams,
    calibrate_tau,
    contribution_report,
    estimate_r0,
    final_size,
    fit_dispersion,
    gillespie_run,
    max_r0,
    TRANSITION_LABELS,
)
from .fidelity import EmdCache, RefitSettings, data_fit_report, self_fit_baseline
from .gmm import FittedModels, fit_age_stratified, log_transform
from .networks import (
    ContactMatrix,
    PopulationSpec,
    build_contact_matrix,
    generate_gmm_network,
    generate_sbm,
    read_network,
    write_network,
)
from .survey import (
    ColumnMap,
    SurveyFormatError,
    build_ego_vectors,
    build_mixing_prior,
    parse_survey,
)


class ConfigError(ValueError):
    """The config document is malformed, inconsistent, or references missing files."""


class PipelineStageError(RuntimeError):
    """A stage failed; carries the stage name and the original exception."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# Schema: leaves are (default, type). Numeric leaves typed float accept ints.
# None defaults mean "optional, no value".
_SCHEMA = {
    "label": ("dataset", str),
    "seed": (0, int),
    "participants": (None, str),
    "contacts": (None, str),
    "delimiter": (",", str),
    "columns": ({}, dict),
    "network_file": (None, str),
    "models_file": (None, str),
    "population": {
        "n": (100_000, int),
        "age_proportions": (None, list),
    },
    "generator": {
        "method": ("gmm", str),
        "age_stratified": (True, bool),
    },
    "fit": {
        "splits": (100, int),
        "train_frac": (0.8, float),
        "restarts": (3, int),
        "tol": (1e-6, float),
        "max_iter": (500, int),
        "max_components": (30, int),
    },
    "fidelity": {
        "realizations": (100, int),
        "self_fit": (True, bool),
        "self_fit_realizations": (8, int),
        "surrogate_n": (100_000, int),
        "sample_n": (10_000, int),
        "refit_per_realization": (False, bool),
    },
    "simulate": {
        "tau": (None, float),
        "target_r0": (None, float),
        "sigma_inv": (3.0, float),
        "gamma_inv": (4.0, float),
        "duration_weights": (True, bool),
        "replicates": (48, int),
        "calibration_replicates": (48, int),
        "calibration_tol": (0.05, float),
        "min_outbreak": (0.01, float),
        "contribution_generations": ([2], list),
        "record_events": (False, bool),
    },
    "sweep": {
        "tau_grid": (None, list),
        "r0_targets": (None, list),
        "replicates": (48, int),
        "calibration_replicates": (48, int),
        "calibration_tol": (0.05, float),
        "min_outbreak": (0.01, float),
    },
}

# Desk profile: shrink everything that scales runtime; every substitution is
# recorded in the manifest.
_PROFILES = {
    "paper": {},
    "desk": {
        "population.n": 10_000,
        "fit.splits": 20,
        "fidelity.realizations": 12,
        "fidelity.surrogate_n": 20_000,
        "fidelity.sample_n": 2_000,
        "simulate.replicates": 12,
        "simulate.calibration_replicates": 12,
        "sweep.replicates": 12,
        "sweep.calibration_replicates": 12,
    },
}

_COLUMN_FIELDS = {f.name for f in dataclasses.fields(ColumnMap)}


def _validate_section(raw: dict, schema: dict, path: str, out: dict) -> None:
    for key, value in raw.items():
        here = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown config key {here!r}")
        spec = schema[key]
        if isinstance(spec, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here!r} must be an object")
            _validate_section(value, spec, here, out[key])
            continue
        _, typ = spec
        if value is None:
            out[key] = None
            continue
        if typ is bool:
            if not isinstance(value, bool):
                raise ConfigError(f"{here!r} must be a boolean")
        elif typ is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{here!r} must be an integer")
        elif typ is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{here!r} must be a number")
            value = float(value)
        elif not isinstance(value, typ):
            raise ConfigError(f"{here!r} must be of type {typ.__name__}")
        out[key] = value


def _defaults(schema: dict) -> dict:
    out = {}
    for key, spec in schema.items():
        if isinstance(spec, dict):
            out[key] = _defaults(spec)
        else:
            default = spec[0]
            out[key] = json.loads(json.dumps(default)) if default is not None else None
    return out


def _set_path(cfg: dict, dotted: str, value):
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node[p]
    old = node[parts[-1]]
    node[parts[-1]] = value
    return old


def load_config(
    path,
    *,
    seed: int | None = None,
    profile: str = "paper",
) -> tuple[dict, list]:
    """Read, validate, and normalize a config file.

    Returns the effective config plus the list of profile/CLI substitutions
    applied, each as (dotted_key, old, new).
    """
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")

    cfg = _defaults(_SCHEMA)
    _validate_section(raw, _SCHEMA, "", cfg)

    for key in cfg["columns"]:
        if key not in _COLUMN_FIELDS:
            raise ConfigError(f"unknown survey column mapping {key!r}")

    if profile not in _PROFILES:
        raise ConfigError(f"unknown profile {profile!r} (choose from {sorted(_PROFILES)})")
    substitutions = []
    for dotted, value in _PROFILES[profile].items():
        old = _set_path(cfg, dotted, value)
        substitutions.append({"key": dotted, "old": old, "new": value, "source": "profile"})
    if seed is not None:
        old = _set_path(cfg, "seed", int(seed))
        substitutions.append({"key": "seed", "old": old, "new": int(seed), "source": "cli"})

    props = cfg["population"]["age_proportions"]
    if props is not None:
        if len(props) != N_AGE:
            raise ConfigError(f"population.age_proportions must have {N_AGE} entries")
        arr = np.asarray(props, dtype=float)
        if (arr < 0).any() or arr.sum() <= 0:
            raise ConfigError("population.age_proportions must be nonnegative and sum > 0")
        cfg["population"]["age_proportions"] = (arr / arr.sum()).tolist()
    if cfg["generator"]["method"] not in ("gmm", "sbm"):
        raise ConfigError("generator.method must be 'gmm' or 'sbm'")
    gens = cfg["simulate"]["contribution_generations"]
    if not gens or not all(isinstance(g, int) and g >= 2 for g in gens):
        raise ConfigError("simulate.contribution_generations must be integers >= 2")
    return cfg, substitutions


def config_hash(cfg: dict) -> str:
    """Hash of the effective config; insensitive to input key order."""
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def plan_stages(command: str, cfg: dict) -> list[str]:
    """Resolve the stage list for a subcommand, honoring cached artifacts."""
    if command == "all":
        stages = ["ingest", "fit", "generate", "fidelity", "simulate"]
        if cfg["sweep"]["tau_grid"] is not None or cfg["sweep"]["r0_targets"] is not None:
            stages.append("sweep")
        return stages
    if command == "ingest":
        return ["ingest"]
    if command == "fit":
        return ["ingest", "fit"]
    if command == "generate":
        pre = [] if cfg["models_file"] else ["ingest", "fit"]
        return pre + ["generate"]
    if command == "fidelity":
        pre = ["ingest"] if cfg["models_file"] else ["ingest", "fit"]
        return pre + ["fidelity"]
    if command in ("simulate", "sweep"):
        if cfg["network_file"]:
            return [command]
        pre = [] if cfg["models_file"] else ["ingest", "fit"]
        return pre + ["generate", command]
    raise ConfigError(f"unknown command {command!r}")


def _check_plan(cfg: dict, stages: list[str]) -> None:
    """Validate that the config carries what the planned stages need."""
    if "ingest" in stages:
        for key in ("participants", "contacts"):
            if not cfg[key]:
                raise ConfigError(f"{key!r} path is required to ingest survey data")
            if not Path(cfg[key]).exists():
                raise ConfigError(f"{key} file {cfg[key]!r} does not exist")
    if "fit" not in stages and any(
        s in stages for s in ("generate", "fidelity")
    ) and cfg["models_file"]:
        if not Path(cfg["models_file"]).exists():
            raise ConfigError(f"models_file {cfg['models_file']!r} does not exist")
    if cfg["network_file"] and ("simulate" in stages or "sweep" in stages):
        prefix = Path(cfg["network_file"])
        if not prefix.parent.joinpath(prefix.name + ".edges").exists():
            raise ConfigError(f"network_file {cfg['network_file']!r} not found (.edges missing)")
    needs_population = any(s in stages for s in ("generate", "fidelity"))
    if needs_population and cfg["population"]["age_proportions"] is None:
        raise ConfigError("population.age_proportions is required to build networks")
    if "simulate" in stages:
        sim = cfg["simulate"]
        if (sim["tau"] is None) == (sim["target_r0"] is None):
            raise ConfigError("simulate needs exactly one of 'tau' or 'target_r0'")
    if "sweep" in stages:
        sw = cfg["sweep"]
        if (sw["tau_grid"] is None) == (sw["r0_targets"] is None):
            raise ConfigError("sweep needs exactly one of 'tau_grid' or 'r0_targets'")


def _models_payload(method: str, fitted) -> dict:
    if method == "gmm":
        return {"method": "gmm", "models": json.loads(fitted.to_json())}
    return {
        "method": "sbm",
        "C": fitted.C.tolist(),
        "C_tau": fitted.C_tau.tolist(),
        "respondents": fitted.respondents.tolist(),
        "empty_groups": list(fitted.empty_groups),
    }


def _models_from_payload(payload: dict):
    method = payload.get("method")
    if method == "gmm":
        return "gmm", FittedModels.from_json(json.dumps(payload["models"]))
    if method == "sbm":
        return "sbm", ContactMatrix(
            C=np.asarray(payload["C"], dtype=float),
            C_tau=np.asarray(payload["C_tau"], dtype=float),
            respondents=np.asarray(payload["respondents"], dtype=np.int64),
            empty_groups=list(payload.get("empty_groups", [])),
        )
    raise ConfigError(f"models file has unknown method {method!r}")


def _pooled_contact_matrix(vectors, proportions: np.ndarray) -> ContactMatrix:
    """Age-blind contact rates: uniform mixing at the survey's mean degree.

    Every ego directs its contacts at age groups in proportion to population
    share, with the pooled duration split, so the block model collapses to a
    single-density random graph.
    """
    total = np.zeros(N_AGE * N_DUR, dtype=np.int64)
    per_age = np.zeros(N_AGE, dtype=np.int64)
    for vec in vectors:
        total += vec.counts
        per_age[vec.owner_age] += 1
    mean_contacts = total.sum() / len(vectors)
    dur_counts = total.reshape(N_AGE, N_DUR).sum(axis=0)
    if dur_counts.sum() > 0:
        dur_share = dur_counts / dur_counts.sum()
    else:
        dur_share = np.full(N_DUR, 1.0 / N_DUR)
    C_tau = (
        mean_contacts
        * proportions[None, :, None]
        * dur_share[None, None, :]
        * np.ones((N_AGE, 1, 1))
    )
    return ContactMatrix(
        C=C_tau.sum(axis=2),
        C_tau=C_tau,
        respondents=per_age,
        empty_groups=[],
    )


def _write_csv(frame: pd.DataFrame, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)


class PipelineRunner:
    """Executes a planned stage list and records the manifest."""

    def __init__(self, cfg: dict, command: str, out_root="runs"):
        self.cfg = cfg
        self.command = command
        self.stages = plan_stages(command, cfg)
        _check_plan(cfg, self.stages)
        self.hash = config_hash(cfg)
        stamp = datetime.now().strftime("%Y%m%dT%H%M%S%f")
        self.run_dir = Path(out_root) / f"{stamp}-{self.hash}"
        self.run_dir.mkdir(parents=True, exist_ok=False)
        self.state: dict = {}
        self.manifest = {
            "config_hash": self.hash,
            "seed": cfg["seed"],
            "command": command,
            "package_version": __version__,
            "numpy_version": np.__version__,
            "created": datetime.now().isoformat(timespec="seconds"),
            "stages": {},
            "substitutions": [],
            "files": [],
            "config": cfg,
        }

    # -- helpers ----------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.cfg["seed"]

    def _population_spec(self) -> PopulationSpec:
        return PopulationSpec(
            n=self.cfg["population"]["n"],
            age_proportions=np.asarray(self.cfg["population"]["age_proportions"]),
        )

    def _ensure_models(self):
        if "models" in self.state:
            return self.state["models"]
        path = self.cfg["models_file"]
        if not path:
            raise PipelineStageError(
                self.command, RuntimeError("no fitted models available")
            )
        method, fitted = _models_from_payload(json.loads(Path(path).read_text()))
        if method != self.cfg["generator"]["method"]:
            raise ConfigError(
                f"models_file holds a {method!r} fit but generator.method is "
                f"{self.cfg['generator']['method']!r}"
            )
        self.state["models"] = fitted
        self.manifest["loaded_models"] = str(path)
        return fitted

    def _ensure_network(self):
        if "network" in self.state:
            return self.state["network"]
        prefix = Path(self.cfg["network_file"])
        network = read_network(prefix.parent, prefix.name)
        self.state["network"] = network
        self.manifest["loaded_network"] = str(prefix)
        return network

    # -- stages ------------------------------------------------------------

    def _stage_ingest(self) -> None:
        cfg = self.cfg
        columns = ColumnMap(**cfg["columns"]) if cfg["columns"] else None
        records, report = parse_survey(
            cfg["participants"], cfg["contacts"],
            columns=columns, delimiter=cfg["delimiter"],
        )
        if not records:
            raise SurveyFormatError("participants", None, "no usable participants")
        prior = build_mixing_prior(records, report)
        vectors = build_ego_vectors(records, prior, seed=self.seed, report=report)
        self.state["vectors"] = vectors
        self.state["report"] = report

        hists = np.stack([v.counts for v in vectors])
        ages = np.array([v.owner_age for v in vectors], dtype=np.int64)
        self.state["data_hists"] = hists
        self.state["data_age_hists"] = hists.reshape(-1, N_AGE, N_DUR).sum(axis=2)
        self.state["data_ages"] = ages

        frame = pd.DataFrame(hists, columns=[f"cell_{i}" for i in range(N_AGE * N_DUR)])
        frame.insert(0, "age_group", ages)
        _write_csv(frame, self.run_dir / "tables" / "ego_vectors.csv")
        (self.run_dir / "tables").mkdir(exist_ok=True)
        (self.run_dir / "tables" / "ingest_report.json").write_text(report.to_json())

    def _stage_fit(self) -> None:
        cfg = self.cfg
        method = cfg["generator"]["method"]
        vectors = self.state["vectors"]
        age_stratified = cfg["generator"]["age_stratified"]

        if method == "gmm":
            by_age: dict[int, np.ndarray] = {}
            hists, ages = self.state["data_hists"], self.state["data_ages"]
            for a in range(N_AGE):
                rows = hists[ages == a]
                if rows.shape[0]:
                    by_age[a] = log_transform(rows.astype(float))
            fit_cfg = cfg["fit"]
            fitted = fit_age_stratified(
                by_age,
                self.seed,
                splits=fit_cfg["splits"],
                train_frac=fit_cfg["train_frac"],
                pooled=not age_stratified,
                restarts=fit_cfg["restarts"],
                tol=fit_cfg["tol"],
                max_iter=fit_cfg["max_iter"],
                max_components=fit_cfg["max_components"],
            )
            rows = []
            for a, trace in sorted(fitted.traces.items()):
                for n_g, mean_bic in sorted(trace.mean_bic.items()):
                    rows.append({
                        "age_group": a,
                        "n_components": n_g,
                        "mean_bic": mean_bic,
                        "selected": n_g == trace.selected,
                        "small_data": trace.small_data,
                    })
                if fitted.pooled:
                    break
            _write_csv(pd.DataFrame(rows), self.run_dir / "tables" / "bic_trace.csv")
        else:
            spec = (
                self._population_spec()
                if cfg["population"]["age_proportions"] is not None
                else None
            )
            if age_stratified:
                fitted = build_contact_matrix(vectors, spec)
            else:
                if spec is None:
                    raise ConfigError(
                        "population.age_proportions is required for the age-blind block model"
                    )
                fitted = _pooled_contact_matrix(vectors, spec.age_proportions)

        self.state["models"] = fitted
        payload = _models_payload(method, fitted)
        (self.run_dir / "models.json").write_text(json.dumps(payload, indent=1))

    def _stage_generate(self) -> None:
        method = self.cfg["generator"]["method"]
        fitted = self._ensure_models()
        spec = self._population_spec()
        if method == "gmm":
            network = generate_gmm_network(fitted, spec, spawn_rng(self.seed, 70))
        else:
            network = generate_sbm(fitted, spec, spawn_rng(self.seed, 71))
        self.state["network"] = network
        write_network(network, self.run_dir / "networks", "network")

    def _stage_fidelity(self) -> None:
        cfg = self.cfg
        method = cfg["generator"]["method"]
        fitted = self._ensure_models()
        stratify = cfg["generator"]["age_stratified"]
        spec = self._population_spec()
        cache = EmdCache()
        label = cfg["label"]

        reports = []
        data_report = data_fit_report(
            method,
            fitted,
            spec,
            self.state["data_age_hists"],
            self.state["data_ages"],
            self.seed,
            cfg["fidelity"]["realizations"],
            stratify_by_age=stratify,
            cache=cache,
        )
        reports.append(data_report)

        if cfg["fidelity"]["self_fit"]:
            refit = RefitSettings(
                splits=cfg["fit"]["splits"],
                train_frac=cfg["fit"]["train_frac"],
                restarts=cfg["fit"]["restarts"],
                tol=cfg["fit"]["tol"],
                max_iter=cfg["fit"]["max_iter"],
                pooled=not stratify,
            )
            surrogate_spec = PopulationSpec(
                n=cfg["fidelity"]["surrogate_n"],
                age_proportions=spec.age_proportions,
            )
            self_report = self_fit_baseline(
                method,
                fitted,
                surrogate_spec,
                cfg["fidelity"]["sample_n"],
                self.seed,
                cfg["fidelity"]["self_fit_realizations"],
                refit=refit,
                stratify_by_age=stratify,
                refit_per_realization=cfg["fidelity"]["refit_per_realization"],
                cache=cache,
            )
            reports.append(self_report)

        real_rows = []
        summary_rows = []
        for rep in reports:
            real_rows.extend(rep.to_rows(label))
            lo, hi = rep.interval()
            summary_rows.append({
                "dataset": label,
                "method": rep.method,
                "kind": rep.kind,
                "stratified": stratify,
                "realizations": rep.realizations,
                "mean_per_individual": rep.mean,
                "ci_lo": lo,
                "ci_hi": hi,
                "zero_data_egos": rep.zero_data_egos,
            })
        _write_csv(
            pd.DataFrame(real_rows),
            self.run_dir / "tables" / "fidelity_realizations.csv",
        )
        _write_csv(
            pd.DataFrame(summary_rows), self.run_dir / "tables" / "fidelity.csv"
        )

    def _stage_simulate(self) -> None:
        cfg = self.cfg["simulate"]
        network = self._ensure_network()
        tau = cfg["tau"]
        calibration = None
        if cfg["target_r0"] is not None:
            calibration = calibrate_tau(
                network,
                cfg["target_r0"],
                self.seed,
                use_duration_weights=cfg["duration_weights"],
                sigma_inv=cfg["sigma_inv"],
                gamma_inv=cfg["gamma_inv"],
                replicates=cfg["calibration_replicates"],
                tol=cfg["calibration_tol"],
            )
            tau = calibration.tau
            _write_csv(
                pd.DataFrame(
                    [{"tau": t, "pooled_r0": r} for t, r in calibration.evaluations]
                ),
                self.run_dir / "tables" / "calibration.csv",
            )

        params = EpidemicParams(
            tau=tau,
            sigma_inv=cfg["sigma_inv"],
            gamma_inv=cfg["gamma_inv"],
            use_duration_weights=cfg["duration_weights"],
        )
        traces = []
        for r in range(cfg["replicates"]):
            trace = gillespie_run(
                network,
                params,
                spawn_rng(self.seed, 80, r),
                record_events=cfg["record_events"],
            )
            traces.append(trace)
            if cfg["record_events"]:
                ev = trace.events
                frame = pd.DataFrame({
                    "time": ev.times,
                    "node": ev.nodes,
                    "transition": [TRANSITION_LABELS[k] for k in ev.kinds],
                    "infector": ev.infectors,
                })
                _write_csv(frame, self.run_dir / "tables" / f"events-r{r}.csv")

        r0 = estimate_r0(traces)
        ceiling = max_r0(traces, network)
        size = final_size(traces, r0, min_outbreak=cfg["min_outbreak"])
        secondary = np.concatenate([t.secondary_cases(2) for t in traces])
        dispersion = None
        if secondary.size:
            dispersion = fit_dispersion(secondary, spawn_rng(self.seed, 81))
        contrib = contribution_report(
            traces, network, tuple(cfg["contribution_generations"])
        )

        _write_csv(
            pd.DataFrame([t.summary() for t in traces]).drop(columns=["runtime_s"]),
            self.run_dir / "tables" / "epidemic_replicates.csv",
        )
        summary = {
            "tau": tau,
            "target_r0": cfg["target_r0"],
            "pooled_r0": r0,
            "max_r0": ceiling,
            "final_size": size,
            "replicates": cfg["replicates"],
            "secondary_sample": int(secondary.size),
            "k": dispersion.k if dispersion else math.nan,
            "k_lo": dispersion.ci[0] if dispersion else math.nan,
            "k_hi": dispersion.ci[1] if dispersion else math.nan,
            "k_unbounded": dispersion.unbounded if dispersion else False,
            "calibration_unreachable": calibration.unreachable if calibration else False,
        }
        _write_csv(
            pd.DataFrame([summary]), self.run_dir / "tables" / "epidemic_summary.csv"
        )

        rows = []
        if contrib.duration_share is not None:
            for d, share in enumerate(contrib.duration_share):
                rows.append({"axis": "duration", "category": DURATION_LABELS[d],
                             "share": share})
        if contrib.age_share is not None:
            for a, share in enumerate(contrib.age_share):
                rows.append({"axis": "age", "category": AGE_LABELS[a], "share": share})
        _write_csv(pd.DataFrame(rows), self.run_dir / "tables" / "contributions.csv")
        self.state["traces"] = traces

    def _stage_sweep(self) -> None:
        cfg = self.cfg["sweep"]
        sim = self.cfg["simulate"]
        network = self._ensure_network()
        rows = []

        def run_point(point: int, tau: float, target, unreachable: bool, ceiling_cal):
            params = EpidemicParams(
                tau=tau,
                sigma_inv=sim["sigma_inv"],
                gamma_inv=sim["gamma_inv"],
                use_duration_weights=sim["duration_weights"],
            )
            traces = [
                gillespie_run(network, params, spawn_rng(self.seed, 91, point, r))
                for r in range(cfg["replicates"])
            ]
            r0 = estimate_r0(traces)
            ceiling = max_r0(traces, network)
            if math.isnan(ceiling) and ceiling_cal is not None:
                ceiling = ceiling_cal
            size = final_size(traces, r0, min_outbreak=cfg["min_outbreak"])
            secondary = np.concatenate([t.secondary_cases(2) for t in traces])
            if math.isnan(r0):
                # No run produced any second-generation case: nothing spread.
                r0 = 0.0
            if secondary.size:
                disp = fit_dispersion(secondary, spawn_rng(self.seed, 92, point))
                k, (k_lo, k_hi) = disp.k, disp.ci
            else:
                k = k_lo = k_hi = math.nan
            rows.append({
                "tau": tau,
                "target_r0": target if target is not None else math.nan,
                "pooled_r0": r0,
                "max_r0": ceiling,
                "final_size": size,
                "k": k,
                "k_lo": k_lo,
                "k_hi": k_hi,
                "unreachable": unreachable,
                "replicates": cfg["replicates"],
            })

        if cfg["tau_grid"] is not None:
            for point, tau in enumerate(cfg["tau_grid"]):
                run_point(point, float(tau), None, False, None)
        else:
            for point, target in enumerate(cfg["r0_targets"]):
                cal_seed = int(spawn_rng(self.seed, 90, point).integers(2**62))
                calibration = calibrate_tau(
                    network,
                    float(target),
                    cal_seed,
                    use_duration_weights=sim["duration_weights"],
                    sigma_inv=sim["sigma_inv"],
                    gamma_inv=sim["gamma_inv"],
                    replicates=cfg["calibration_replicates"],
                    tol=cfg["calibration_tol"],
                )
                run_point(
                    point,
                    calibration.tau,
                    float(target),
                    calibration.unreachable,
                    calibration.max_r0,
                )

        _write_csv(pd.DataFrame(rows), self.run_dir / "tables" / "sweep.csv")

    # -- driver -------------------------------------------------------------

    def run(self) -> Path:
        try:
            for stage in self.stages:
                t0 = time.perf_counter()
                try:
                    getattr(self, f"_stage_{stage}")()
                except Exception as exc:
                    self.manifest["status"] = "failed"
                    self.manifest["stages"][stage] = {
                        "status": "failed",
                        "seconds": round(time.perf_counter() - t0, 3),
                        "error": str(exc),
                    }
                    if isinstance(exc, (ConfigError, PipelineStageError)):
                        raise
                    raise PipelineStageError(stage, exc) from exc
                self.manifest["stages"][stage] = {
                    "status": "ok",
                    "seconds": round(time.perf_counter() - t0, 3),
                }
            self.manifest["status"] = "ok"
        finally:
            self._write_manifest()
        return self.run_dir

    def _write_manifest(self) -> None:
        files = []
        for path in sorted(self.run_dir.rglob("*")):
            if path.is_file() and path.name != "manifest.json":
                files.append({
                    "path": str(path.relative_to(self.run_dir)),
                    "bytes": path.stat().st_size,
                })
        files.append({"path": "manifest.json"})
        self.manifest["files"] = files
        (self.run_dir / "manifest.json").write_text(
            json.dumps(self.manifest, indent=1, default=str)
        )


def run_pipeline(
    config_path,
    command: str = "all",
    *,
    seed: int | None = None,
    profile: str = "paper",
    out_root="runs",
) -> Path:
    """Load a config, run the planned stages, return the run directory."""
    cfg, substitutions = load_config(config_path, seed=seed, profile=profile)
    runner = PipelineRunner(cfg, command, out_root)
    runner.manifest["substitutions"] = substitutions
    runner.manifest["profile"] = profile
    return runner.run()
