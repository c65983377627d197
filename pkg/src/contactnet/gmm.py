"""Per-age-group Gaussian mixture fitting over log-transformed ego vectors.

The model for one age group is a finite mixture of full-covariance 45-dim
Gaussians fit by EM on ln(counts + 1). The component count is chosen by
scanning n_g = 1, 2, ... and averaging test-set BIC over repeated random
80/20 splits; the scan stops as soon as the average BIC rises, and the
winning count is refit on the full data.

Conventions that matter for reproducibility:

- BIC = p * ln(m) - 2 * ln(L), with m the test-set size, L the test-set
  likelihood under the train fit, and p = n_g * (45 + 45*46/2) + (n_g - 1).
- Covariances get +1e-6 on the diagonal every M-step.
- Initialization is k-means++ seeding with 3 restarts, best train likelihood
  kept.
- The same split sequence is reused across candidate n_g values (paired
  comparison keeps the stop rule stable).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .common import N_AGE, N_CELLS, spawn_rng, stochastic_round

COV_FLOOR = 1e-6
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 500
DEFAULT_RESTARTS = 3
DEFAULT_SPLITS = 100
DEFAULT_TRAIN_FRAC = 0.8
MAX_COMPONENTS = 30
# Responsibility mass below this triggers a component re-seed.
COLLAPSE_FLOOR = 1e-8


def log_transform(counts: np.ndarray) -> np.ndarray:
    """Elementwise ln(x + 1); inverse is exp(y) - 1."""
    return np.log1p(np.asarray(counts, dtype=float))


def inverse_log_transform(values: np.ndarray) -> np.ndarray:
    return np.expm1(values)


def n_free_parameters(n_g: int, dim: int = N_CELLS) -> int:
    return n_g * (dim + dim * (dim + 1) // 2) + (n_g - 1)


@dataclass
class MixtureModel:
    weights: np.ndarray  # (n_g,)
    means: np.ndarray  # (n_g, 45)
    covariances: np.ndarray  # (n_g, 45, 45)
    log_likelihood: float = np.nan  # on the fitting data
    ll_path: list = field(default_factory=list)
    reseeds: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covariances = np.asarray(self.covariances, dtype=float)
        if self.covariances.ndim == 2:
            self.covariances = self.covariances[None, :, :]
        self._chol = None

    @property
    def n_g(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _cholesky(self) -> np.ndarray:
        if self._chol is None:
            self._chol = np.linalg.cholesky(self.covariances)
        return self._chol

    def log_density_per_component(self, x: np.ndarray) -> np.ndarray:
        """log(phi_j * N(x | mu_j, Sigma_j)) for each point, shape (m, n_g)."""
        x = np.atleast_2d(x)
        m = x.shape[0]
        out = np.empty((m, self.n_g))
        chol = self._cholesky()
        const = self.dim * np.log(2.0 * np.pi)
        for j in range(self.n_g):
            L = chol[j]
            diff = x - self.means[j]
            y = solve_triangular(L, diff.T, lower=True, check_finite=False)
            maha = np.einsum("ij,ij->j", y, y)
            logdet = 2.0 * np.log(np.diag(L)).sum()
            with np.errstate(divide="ignore"):
                logw = np.log(self.weights[j])
            out[:, j] = logw - 0.5 * (const + logdet + maha)
        return out

    def score(self, x: np.ndarray) -> float:
        """Total log-likelihood of the points in x."""
        return float(logsumexp(self.log_density_per_component(x), axis=1).sum())

    def sample_log_space(self, n: int, rng: np.random.Generator) -> np.ndarray:
        counts = rng.multinomial(n, self.weights)
        out = np.empty((n, self.dim))
        chol = self._cholesky()
        pos = 0
        for j, nj in enumerate(counts):
            if nj == 0:
                continue
            z = rng.standard_normal((nj, self.dim))
            out[pos : pos + nj] = self.means[j] + z @ chol[j].T
            pos += nj
        # Do not leak the component-block ordering to callers.
        rng.shuffle(out, axis=0)
        return out

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "log_likelihood": None if np.isnan(self.log_likelihood) else self.log_likelihood,
            "reseeds": self.reseeds,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MixtureModel":
        ll = doc.get("log_likelihood")
        return cls(
            np.array(doc["weights"]),
            np.array(doc["means"]),
            np.array(doc["covariances"]),
            np.nan if ll is None else float(ll),
            reseeds=int(doc.get("reseeds", 0)),
        )


def sample_egos(model: MixtureModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n synthetic ego vectors: Gaussian in log space, exp-1 back,
    negatives clamped to zero, fractions stochastically rounded."""
    raw = inverse_log_transform(model.sample_log_space(n, rng))
    np.maximum(raw, 0.0, out=raw)
    return stochastic_round(raw, rng)


def sample_ego(model: MixtureModel, rng: np.random.Generator) -> np.ndarray:
    return sample_egos(model, 1, rng)[0]


def _kmeanspp_init(x: np.ndarray, n_g: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ center seeding; returns (n_g, dim) initial centers."""
    m = x.shape[0]
    centers = np.empty((n_g, x.shape[1]))
    centers[0] = x[rng.integers(m)]
    closest = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, n_g):
        total = closest.sum()
        if total <= 0:
            centers[j] = x[rng.integers(m)]
        else:
            centers[j] = x[rng.choice(m, p=closest / total)]
        closest = np.minimum(closest, np.sum((x - centers[j]) ** 2, axis=1))
    return centers


def _initial_model(x: np.ndarray, n_g: int, rng: np.random.Generator) -> MixtureModel:
    m, dim = x.shape
    centers = _kmeanspp_init(x, n_g, rng)
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assign = d2.argmin(axis=1)

    global_cov = np.cov(x, rowvar=False) if m > 1 else np.zeros((dim, dim))
    global_cov = np.atleast_2d(global_cov) + COV_FLOOR * np.eye(dim)

    weights = np.empty(n_g)
    means = np.empty((n_g, dim))
    covs = np.empty((n_g, dim, dim))
    for j in range(n_g):
        members = x[assign == j]
        if len(members) == 0:
            weights[j] = 1.0
            means[j] = centers[j]
            covs[j] = global_cov
            continue
        weights[j] = len(members)
        means[j] = members.mean(axis=0)
        diff = members - means[j]
        covs[j] = (diff.T @ diff) / len(members) + COV_FLOOR * np.eye(dim)
    weights /= weights.sum()
    return MixtureModel(weights, means, covs)


def _em_once(
    x: np.ndarray,
    model: MixtureModel,
    rng: np.random.Generator,
    tol: float,
    max_iter: int,
) -> MixtureModel:
    m, dim = x.shape
    n_g = model.n_g
    eye = np.eye(dim)
    ll_path = []
    reseeds = 0
    prev_ll = -np.inf

    for _ in range(max_iter):
        log_dens = model.log_density_per_component(x)
        log_norm = logsumexp(log_dens, axis=1)
        ll = float(log_norm.sum())
        ll_path.append(ll)
        resp = np.exp(log_dens - log_norm[:, None])

        nj = resp.sum(axis=0)
        collapsed = np.flatnonzero(nj < COLLAPSE_FLOOR)
        for j in collapsed:
            # Re-seed a dead component on a random data point.
            resp[:, j] = 0.0
            pick = rng.integers(m)
            resp[pick, :] = 0.0
            resp[pick, j] = 1.0
            reseeds += 1
        if len(collapsed):
            nj = resp.sum(axis=0)

        weights = nj / nj.sum()
        weights = weights / weights.sum()
        means = (resp.T @ x) / nj[:, None]
        covs = np.empty((n_g, dim, dim))
        for j in range(n_g):
            diff = x - means[j]
            scatter = (resp[:, j][:, None] * diff).T @ diff / nj[j]
            scatter = 0.5 * (scatter + scatter.T)
            covs[j] = scatter + COV_FLOOR * eye

        model = MixtureModel(weights, means, covs)

        if np.isfinite(prev_ll):
            rel = abs(ll - prev_ll) / max(abs(prev_ll), 1.0)
            if rel < tol:
                break
        prev_ll = ll

    final_ll = model.score(x)
    ll_path.append(final_ll)
    model.log_likelihood = final_ll
    model.ll_path = ll_path
    model.reseeds = reseeds
    return model


def fit_em(
    x: np.ndarray,
    n_g: int,
    rng: np.random.Generator,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    restarts: int = DEFAULT_RESTARTS,
) -> MixtureModel:
    """Fit an n_g-component mixture to log-space vectors x, best of `restarts`."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if n_g < 1:
        raise ValueError("n_g must be >= 1")
    if n_g > x.shape[0]:
        raise ValueError(f"n_g={n_g} exceeds data size {x.shape[0]}")

    best = None
    for _ in range(restarts):
        model = _em_once(x, _initial_model(x, n_g, rng), rng, tol, max_iter)
        if best is None or model.log_likelihood > best.log_likelihood:
            best = model
    return best


@dataclass
class BicTrace:
    """Per-candidate BIC samples from the split scan plus the selection."""

    bic_samples: dict  # n_g -> list of test-set BIC values
    mean_bic: dict  # n_g -> mean
    selected: int
    small_data: bool = False
    refit_on_all: bool = True

    def to_dict(self) -> dict:
        return {
            "bic_samples": {str(k): list(map(float, v)) for k, v in self.bic_samples.items()},
            "mean_bic": {str(k): float(v) for k, v in self.mean_bic.items()},
            "selected": self.selected,
            "small_data": self.small_data,
            "refit_on_all": self.refit_on_all,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BicTrace":
        return cls(
            {int(k): list(v) for k, v in doc["bic_samples"].items()},
            {int(k): float(v) for k, v in doc["mean_bic"].items()},
            int(doc["selected"]),
            bool(doc.get("small_data", False)),
            bool(doc.get("refit_on_all", True)),
        )


def test_set_bic(model: MixtureModel, test: np.ndarray) -> float:
    m = test.shape[0]
    return n_free_parameters(model.n_g, model.dim) * np.log(m) - 2.0 * model.score(test)


def select_components(
    x: np.ndarray,
    seed: int,
    splits: int = DEFAULT_SPLITS,
    train_frac: float = DEFAULT_TRAIN_FRAC,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    restarts: int = DEFAULT_RESTARTS,
    max_components: int = MAX_COMPONENTS,
    stream_key: tuple = (),
) -> tuple[int, MixtureModel, BicTrace]:
    """Scan component counts by mean test-set BIC over random splits.

    Stops at the first count whose mean BIC exceeds the previous one and
    returns the previous count refit on all the data. Data too small to split
    (fewer than 5 vectors) falls back to a single component, flagged.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m = x.shape[0]

    if m < 5:
        rng = spawn_rng(seed, *stream_key, 0, 0)
        model = fit_em(x, 1, rng, tol, max_iter, restarts)
        trace = BicTrace({}, {}, 1, small_data=True)
        return 1, model, trace

    n_test = max(1, int(round(m * (1.0 - train_frac))))
    n_train = m - n_test
    upper = int(max(1, min(max_components, m // 10, n_train)))

    # One split layout shared by every candidate count (paired comparison).
    split_perms = [
        spawn_rng(seed, *stream_key, 0, s).permutation(m) for s in range(splits)
    ]

    bic_samples: dict[int, list] = {}
    mean_bic: dict[int, float] = {}
    best_n = 1
    for n_g in range(1, upper + 1):
        samples = []
        for s, perm in enumerate(split_perms):
            train, test = x[perm[n_test:]], x[perm[:n_test]]
            rng = spawn_rng(seed, *stream_key, n_g, s)
            model = fit_em(train, n_g, rng, tol, max_iter, restarts)
            samples.append(test_set_bic(model, test))
        bic_samples[n_g] = samples
        mean_bic[n_g] = float(np.mean(samples))
        if n_g > 1 and mean_bic[n_g] > mean_bic[n_g - 1]:
            best_n = n_g - 1
            break
        best_n = n_g

    final_rng = spawn_rng(seed, *stream_key, 10_000 + best_n)
    model = fit_em(x, best_n, final_rng, tol, max_iter, restarts)
    trace = BicTrace(bic_samples, mean_bic, best_n)
    return best_n, model, trace


@dataclass
class FittedModels:
    """Fitted mixtures for each age group (or one pooled model when age is off)."""

    models: dict  # age group -> MixtureModel (all groups share one when pooled)
    traces: dict  # age group -> BicTrace
    pooled: bool = False

    def model_for(self, age_group: int) -> MixtureModel:
        return self.models[age_group]

    def to_json(self) -> str:
        if self.pooled:
            groups = {"pooled": {"model": self.models[0].to_dict(), "trace": self.traces[0].to_dict()}}
        else:
            groups = {
                str(a): {"model": self.models[a].to_dict(), "trace": self.traces[a].to_dict()}
                for a in sorted(self.models)
            }
        return json.dumps({"pooled": self.pooled, "groups": groups})

    @classmethod
    def from_json(cls, text: str) -> "FittedModels":
        doc = json.loads(text)
        if doc["pooled"]:
            entry = doc["groups"]["pooled"]
            model = MixtureModel.from_dict(entry["model"])
            trace = BicTrace.from_dict(entry["trace"])
            return cls({a: model for a in range(9)}, {a: trace for a in range(9)}, True)
        models, traces = {}, {}
        for key, entry in doc["groups"].items():
            a = int(key)
            models[a] = MixtureModel.from_dict(entry["model"])
            traces[a] = BicTrace.from_dict(entry["trace"])
        return cls(models, traces, False)


def fit_age_stratified(
    log_vectors_by_age: dict,
    seed: int,
    splits: int = DEFAULT_SPLITS,
    train_frac: float = DEFAULT_TRAIN_FRAC,
    pooled: bool = False,
    **em_kwargs,
) -> FittedModels:
    """Fit one mixture per age group, or one pooled mixture over all groups.

    `log_vectors_by_age` maps age group -> (m_a, 45) arrays already in log
    space. Each (group, split) task draws from its own seed-derived stream, so
    the result does not depend on execution order.
    """
    if pooled:
        stacked = np.vstack([v for v in log_vectors_by_age.values() if len(v)])
        _, model, trace = select_components(
            stacked, seed, splits, train_frac, stream_key=(99,), **em_kwargs
        )
        ages = list(log_vectors_by_age)
        return FittedModels({a: model for a in ages}, {a: trace for a in ages}, True)

    models, traces = {}, {}
    for a, vectors in sorted(log_vectors_by_age.items()):
        if len(vectors) == 0:
            continue
        _, model, trace = select_components(
            vectors, seed, splits, train_frac, stream_key=(int(a),), **em_kwargs
        )
        models[a] = model
        traces[a] = trace

    # Groups the survey never observed still need a model so that generated
    # populations containing them can be sampled: share one pooled fit.
    missing = [a for a in range(N_AGE) if a not in models]
    if missing:
        stacked = np.vstack([v for v in log_vectors_by_age.values() if len(v)])
        _, fallback, fallback_trace = select_components(
            stacked, seed, splits, train_frac, stream_key=(99,), **em_kwargs
        )
        for a in missing:
            models[a] = fallback
            traces[a] = fallback_trace
    return FittedModels(models, traces, False)
