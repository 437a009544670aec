"""Metrics, transductive baselines and evaluation workflows."""
from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ModelConfig, Params, predict
from .pde import MetaDataset, OperatorDataset
from .random_fields import RngStream
from .spectral import SpectralCodec, max_modes
from .training import split_episode

RMSE_FLOOR = 1e-12
CI_Z = 1.96
EVAL_STREAM = 0xE7A1
OUTLIER_STREAM = 0x0071


def _sq_norms(x: np.ndarray, vector_axis: int | None) -> np.ndarray:
    return x * x if vector_axis is None else (x * x).sum(axis=vector_axis)


def mse(pred, truth, vector_axis: int | None = None) -> float:
    """Mean over evaluation points of the squared (vector) error."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(_sq_norms(pred - truth, vector_axis).mean())


def rmse(pred, truth, vector_axis: int | None = None, return_excluded: bool = False):
    """Mean over points of ``||pred - truth||^2 / ||truth||^2``.

    Points where ``||truth||^2 < RMSE_FLOOR`` are left out and counted.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    den = _sq_norms(truth, vector_axis)
    keep = den >= RMSE_FLOOR
    if not keep.any():
        raise ValueError("every evaluation point has a vanishing reference value")
    val = float((_sq_norms(pred - truth, vector_axis)[keep] / den[keep]).mean())
    return (val, int((~keep).sum())) if return_excluded else val


def per_item_relative(pred, truth) -> np.ndarray:
    """Function-level relative error ``||pred - truth||^2 / ||truth||^2`` of each row."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    return ((pred - truth) ** 2).sum(axis=-1) / np.maximum((truth * truth).sum(axis=-1), RMSE_FLOOR)


def per_item_rmse(pred, truth) -> np.ndarray:
    """RMSE of each row of ``(items, points)`` arrays."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    den = truth * truth
    keep = den >= RMSE_FLOOR
    ratio = np.where(keep, (pred - truth) ** 2 / np.where(keep, den, 1.0), 0.0)
    return ratio.sum(axis=-1) / keep.sum(axis=-1)


def knn_regress(ctx_v, ctx_u, qry_v, k: int = 5) -> np.ndarray:
    """Uniform average of the ``k`` nearest context outputs under Euclidean distance.

    Ties go to the lower context index. ``qry_v`` may be one query or a batch.
    """
    ctx_v = np.asarray(ctx_v, dtype=np.float64)
    ctx_u = np.asarray(ctx_u, dtype=np.float64)
    qry_v = np.asarray(qry_v, dtype=np.float64)
    if len(ctx_v) == 0:
        raise ValueError("empty context")
    if not 1 <= k <= len(ctx_v):
        raise ValueError(f"k={k} outside [1, {len(ctx_v)}]")
    single = qry_v.ndim == ctx_v.ndim - 1
    q = qry_v[None] if single else qry_v
    d2 = ((q[:, None, :] - ctx_v[None, :, :]) ** 2).sum(axis=-1)
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    out = ctx_u[nearest].mean(axis=1)
    return out[0] if single else out


def median_gamma(ctx_v) -> float:
    """Inverse of the median pairwise squared distance between context inputs."""
    x = np.asarray(ctx_v, dtype=np.float64)
    if len(x) < 2:
        return 1.0
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=-1)
    med = float(np.median(d2[np.triu_indices(len(x), 1)]))
    return 1.0 / med if med > 0 else 1.0


@dataclass
class RidgeFit:
    alpha: np.ndarray
    gram: np.ndarray
    residual: float


def ridge_rbf_fit(ctx_v, ctx_u, lam: float = 1e-3, gamma: float | None = None) -> tuple[RidgeFit, float]:
    x = np.asarray(ctx_v, dtype=np.float64)
    y = np.asarray(ctx_u, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("empty context")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    gamma = median_gamma(x) if gamma is None else gamma
    sq = (x * x).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    G = np.exp(-gamma * d2)
    G = 0.5 * (G + G.T)
    A = G + lam * np.eye(len(x))
    try:
        alpha = np.linalg.solve(A, y)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"kernel ridge solve failed: {exc}") from exc
    return RidgeFit(alpha, G, float(np.linalg.norm(A @ alpha - y))), gamma


def ridge_rbf_regress(ctx_v, ctx_u, qry_v, lam: float = 1e-3, gamma: float | None = None) -> np.ndarray:
    """Kernel ridge regression with a Gaussian kernel ``exp(-gamma ||v - v'||^2)``."""
    fit, gamma = ridge_rbf_fit(ctx_v, ctx_u, lam, gamma)
    x = np.asarray(ctx_v, dtype=np.float64)
    q = np.asarray(qry_v, dtype=np.float64)
    single = q.ndim == x.ndim - 1
    q = q[None] if single else q
    d2 = ((q[:, None, :] - x[None, :, :]) ** 2).sum(axis=-1)
    out = np.exp(-gamma * d2) @ fit.alpha
    return out[0] if single else out


def ridge_loo_gamma(ctx_v, ctx_u, lam: float = 1e-3, gammas=None) -> float:
    """Pick gamma by closed-form leave-one-out error over a grid around the median heuristic."""
    base = median_gamma(ctx_v)
    gammas = base * np.logspace(-2, 2, 9) if gammas is None else np.asarray(gammas, dtype=np.float64)
    y = np.asarray(ctx_u, dtype=np.float64)
    best, best_err = float(gammas[0]), np.inf
    for g in gammas:
        fit, _ = ridge_rbf_fit(ctx_v, y, lam, float(g))
        inv_diag = np.diag(np.linalg.inv(fit.gram + lam * np.eye(len(y))))
        # LOO residual of point i is alpha_i / [(G + lam I)^-1]_ii
        err = float(((fit.alpha / inv_diag[:, None]) ** 2).mean())
        if err < best_err:
            best, best_err = float(g), err
    return best


class KNNRegressor:
    """k-NN on the raw grid, or on the first ``modes`` Fourier features with ``metric="modes"``."""

    name = "knn"

    def __init__(self, k: int = 5, metric: str = "grid", modes: int = 25):
        if metric not in ("grid", "modes"):
            raise ValueError(f"metric must be 'grid' or 'modes', got {metric!r}")
        self.k = k
        self.metric = metric
        self.modes = modes

    def __call__(self, ctx_v, ctx_u, qry_v):
        if self.metric == "modes":
            n = np.shape(ctx_v)[-1]
            codec = SpectralCodec(n, min(self.modes, max_modes(n)))
            ctx_v, qry_v = codec.encode(ctx_v), codec.encode(qry_v)
        return knn_regress(ctx_v, ctx_u, qry_v, min(self.k, len(ctx_v)))


class RidgeRegressor:
    name = "ridge"

    def __init__(self, lam: float = 1e-3, gamma: float | None = None, cv: bool = False):
        self.lam = lam
        self.gamma = gamma
        self.cv = cv

    def __call__(self, ctx_v, ctx_u, qry_v):
        gamma = self.gamma
        if gamma is None and self.cv and len(ctx_v) > 2:
            gamma = ridge_loo_gamma(ctx_v, ctx_u, self.lam)
        return ridge_rbf_regress(ctx_v, ctx_u, qry_v, self.lam, gamma)


class TransducerRegressor:
    """Wraps trained parameters so they regress grid functions directly."""

    name = "transducer"

    def __init__(self, params: Params, config: ModelConfig, codec: SpectralCodec):
        self.params = params
        self.config = config
        self.codec = codec

    def __call__(self, ctx_v, ctx_u, qry_v):
        enc = self.codec.encode
        return self.codec.decode(predict(self.params, self.config, enc(ctx_v), enc(ctx_u), enc(qry_v)))


@dataclass
class RegressionReport:
    regressor: str
    context_n: int
    query_n: int
    mse: list[float]
    rmse: list[float]
    seconds: float
    mean_mse: float = 0.0
    mean_rmse: float = 0.0
    ci_rmse: float = 0.0
    ci_mse: float = 0.0

    def __post_init__(self):
        self.mean_mse, self.ci_mse = mean_ci(self.mse)
        self.mean_rmse, self.ci_rmse = mean_ci(self.rmse)

    def to_dict(self) -> dict:
        return asdict(self)


def mean_ci(values) -> tuple[float, float]:
    """Mean and normal-approximation 95% half-width."""
    x = np.asarray(values, dtype=np.float64)
    if len(x) < 2:
        return float(x.mean()), 0.0
    return float(x.mean()), float(CI_Z * x.std(ddof=1) / np.sqrt(len(x)))


def evaluate_model(regressor, meta_test: MetaDataset, context_n: int, query_n: int,
                   seed: int = 0) -> RegressionReport:
    """Regress ``query_n`` held-out pairs of every operator from ``context_n`` others."""
    t0 = time.perf_counter()
    mses, rmses = [], []
    for i, ds in enumerate(meta_test.datasets):
        gen = RngStream(seed, (EVAL_STREAM, i)).generator()
        c, q = split_episode(len(ds), context_n, query_n, gen)
        pred = regressor(ds.inputs[c], ds.outputs[c], ds.inputs[q])
        mses.append(mse(pred, ds.outputs[q]))
        rmses.append(rmse(pred, ds.outputs[q]))
    return RegressionReport(getattr(regressor, "name", type(regressor).__name__), context_n,
                            query_n, mses, rmses, time.perf_counter() - t0)


@dataclass
class OutlierReport:
    n_elements: int
    regressions: int
    element_mean_rmse: list[float]
    element_counts: list[int]
    mean: float
    std: float
    threshold: float
    flagged: list[int]
    precision: float | None = None
    recall: float | None = None
    labels: list[int] | None = field(default=None)
    score: str = "rmse"

    def to_dict(self) -> dict:
        return asdict(self)


SCORES = {"rmse": per_item_rmse, "relative": per_item_relative}


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def _content_keys(dataset: OperatorDataset) -> np.ndarray:
    """A 64-bit key per element derived from its values, so splits follow elements, not positions."""
    keys = [int.from_bytes(hashlib.blake2b(v.tobytes() + u.tobytes(), digest_size=8).digest(), "little")
            for v, u in zip(dataset.inputs, dataset.outputs)]
    return np.array(keys, dtype=np.uint64)


def outlier_detect(dataset: OperatorDataset, regressor, num_regressions: int = 500,
                   split_fraction: float = 0.5, seed: int = 0, labels=None,
                   n_sigma: float = 3.0, score: str = "rmse") -> OutlierReport:
    """Flag elements whose average held-out RMSE over random splits is anomalous.

    Each regression fits on a random ``split_fraction`` of the elements and
    scores the rest. Elements whose mean RMSE exceeds the mean plus
    ``n_sigma`` standard deviations of all elements' mean RMSEs are flagged.
    Splits are drawn from hashed element contents, so reordering the dataset
    reorders the report and changes nothing else.

    ``score="relative"`` swaps the pointwise RMSE for the function-level
    relative error, which stays finite when an output crosses zero near a
    grid point.
    """
    if score not in SCORES:
        raise ValueError(f"score must be one of {tuple(SCORES)}, got {score!r}")
    n = len(dataset)
    if n < 4:
        raise ValueError("outlier detection needs at least 4 elements")
    n_ctx = int(round(split_fraction * n))
    if not 1 <= n_ctx < n:
        raise ValueError(f"split fraction {split_fraction} leaves no train or test half")
    keys = _content_keys(dataset)
    totals = np.zeros(n)
    counts = np.zeros(n, dtype=int)
    for r in range(num_regressions):
        salt = RngStream(seed, (OUTLIER_STREAM, r)).generator().integers(0, 2**63, dtype=np.uint64)
        with np.errstate(over="ignore"):
            order = np.argsort(_splitmix64(keys ^ salt), kind="stable")
        c, q = order[:n_ctx], order[n_ctx:]
        pred = regressor(dataset.inputs[c], dataset.outputs[c], dataset.inputs[q])
        totals[q] += SCORES[score](pred, dataset.outputs[q])
        counts[q] += 1
    if (counts == 0).any():
        raise ValueError("some elements were never scored; increase num_regressions")
    means = totals / counts
    mu, sd = float(means.mean()), float(means.std())
    thr = mu + n_sigma * sd
    flagged = np.flatnonzero(means > thr)
    precision = recall = None
    lab = None
    if labels is not None:
        lab = np.asarray(labels, dtype=bool)
        tp = int(lab[flagged].sum())
        precision = tp / len(flagged) if len(flagged) else (1.0 if not lab.any() else 0.0)
        recall = tp / int(lab.sum()) if lab.any() else 1.0
        lab = [int(x) for x in lab]
    return OutlierReport(n, num_regressions, [float(x) for x in means], [int(x) for x in counts],
                         mu, sd, thr, [int(i) for i in flagged], precision, recall, lab, score)


def contaminate(clean: OperatorDataset, source: OperatorDataset, fraction: float,
                rng: RngStream) -> tuple[OperatorDataset, np.ndarray]:
    """Replace ``round(fraction * n)`` random elements of ``clean`` by pairs from ``source``."""
    n = len(clean)
    k = int(round(fraction * n))
    gen = rng.generator()
    where = np.sort(gen.choice(n, size=k, replace=False))
    take = gen.choice(len(source), size=k, replace=False)
    v = clean.inputs.copy()
    u = clean.outputs.copy()
    v[where] = source.inputs[take]
    u[where] = source.outputs[take]
    labels = np.zeros(n, dtype=bool)
    labels[where] = True
    return OperatorDataset(clean.grid, v, u, clean.coeffs, clean.t, clean.key), labels


def classify_finite(params: Params, config: ModelConfig, ctx_x, ctx_y, qry_x,
                    qry_labels=None) -> tuple[np.ndarray, float | None]:
    """Finite-dimensional mode: one-hot regression then argmax over classes."""
    ctx_x = np.asarray(ctx_x, dtype=np.float64)
    if ctx_x.shape[1] != config.in_dim or np.shape(ctx_y)[1] != config.out_dim:
        raise ValueError(f"data dims {ctx_x.shape[1]}/{np.shape(ctx_y)[1]} do not match "
                         f"model dims {config.in_dim}/{config.out_dim}")
    scores = predict(params, config, ctx_x, ctx_y, qry_x)
    labels = scores.argmax(axis=1)
    acc = None if qry_labels is None else float((labels == np.asarray(qry_labels)).mean())
    return labels, acc
