"""Meta-training: random episodes drawn from a meta-dataset, MSE on queries, Adam."""
from __future__ import annotations

import csv
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape
from .model import ModelConfig, Params, bind, forward_tape, init_params
from .pde import MetaDataset
from .random_fields import RngStream
from .spectral import SpectralCodec

TRAIN_STREAM = 0x7A1
INIT_STREAM = 0x1A17


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int, dataset: int | None = None):
        super().__init__(message)
        self.step = step
        self.dataset = dataset


@dataclass
class TrainConfig:
    steps: int = 1000
    epochs: int | None = None
    batch_operators: int = 1
    query_count: int = 10
    context_range: tuple[int, int] = (20, 100)
    lr: float = 1e-4
    milestones: tuple[int, ...] | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss_space: str = "grid"

    def __post_init__(self):
        self.context_range = tuple(self.context_range)
        if self.context_range[0] < 1 or self.context_range[1] < self.context_range[0]:
            raise ValueError(f"bad context range {self.context_range}")
        if self.query_count < 1:
            raise ValueError("query_count must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.loss_space not in ("grid", "modes"):
            raise ValueError(f"loss_space must be 'grid' or 'modes', got {self.loss_space!r}")
        if self.milestones is not None:
            self.milestones = tuple(int(m) for m in self.milestones)

    def total_steps(self, n_datasets: int) -> int:
        if self.epochs is not None:
            return self.epochs * max(1, n_datasets // self.batch_operators)
        return self.steps

    def schedule(self, total: int) -> tuple[int, ...]:
        if self.milestones is not None:
            return self.milestones
        return tuple(int(f * total) for f in (0.5, 0.75, 0.9))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["context_range"] = list(self.context_range)
        if self.milestones is not None:
            d["milestones"] = list(self.milestones)
        return d


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: Params) -> AdamState:
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()}, 0)


@dataclass
class TrainingCurve:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def append(self, step: int, loss: float, lr: float, seconds: float) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ValueError(f"step {step} does not follow {self.steps[-1]}")
        self.steps.append(step)
        self.losses.append(loss)
        self.lrs.append(lr)
        self.seconds.append(seconds)

    def extend(self, other: TrainingCurve) -> None:
        for row in zip(other.steps, other.losses, other.lrs, other.seconds):
            self.append(*row)

    def to_csv(self, path) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "lr", "seconds"])
            for row in zip(self.steps, self.losses, self.lrs, self.seconds):
                w.writerow([row[0], repr(row[1]), repr(row[2]), f"{row[3]:.6f}"])
        os.replace(tmp, path)

    @classmethod
    def from_csv(cls, path) -> TrainingCurve:
        curve = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                curve.append(int(row["step"]), float(row["loss"]), float(row["lr"]), float(row["seconds"]))
        return curve

    def smoothed(self, window: int = 50) -> np.ndarray:
        x = np.asarray(self.losses)
        if len(x) < window:
            return x
        return np.convolve(x, np.ones(window) / window, mode="valid")


@dataclass
class Episode:
    ctx_v: np.ndarray
    ctx_u: np.ndarray
    qry_v: np.ndarray
    target: np.ndarray
    synthesis: np.ndarray | None = None
    dataset: int | None = None


def split_episode(n_items: int, context_n: int, query_count: int,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint random (context, query) index sets."""
    if context_n < 1 or query_count < 0:
        raise ValueError("context_n must be >= 1 and query_count >= 0")
    if context_n + query_count > n_items:
        raise ValueError(f"dataset of {n_items} cannot supply {context_n} context + {query_count} queries")
    perm = rng.permutation(n_items)
    return perm[:context_n], perm[context_n:context_n + query_count]


def episode_loss(tape: Tape, p, config: ModelConfig, ep: Episode):
    """Mean squared error over queries and evaluation coordinates.

    With ``ep.synthesis`` set, predictions are mapped to grid values first and
    compared with grid targets; otherwise targets are compared in feature space.
    """
    pred = forward_tape(tape, p, config, ep.ctx_v, ep.ctx_u, ep.qry_v)
    if ep.synthesis is not None:
        pred = pred @ tape.constant(ep.synthesis)
    if pred.shape != ep.target.shape:
        raise ad.ShapeError(f"prediction {pred.shape} vs target {ep.target.shape}")
    d = pred - tape.constant(ep.target)
    return (d * d).mean()


def adam_step(params: Params, grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[Params, AdamState]:
    """Bias-corrected Adam; returns fresh parameter and state dicts."""
    t = state.t + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, theta in params.items():
        g = grads[k]
        if g.shape != theta.shape:
            raise ad.ShapeError(f"gradient for {k}: {g.shape} vs parameter {theta.shape}")
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        new_p[k] = theta - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


def lr_at(base: float, milestones, step: int) -> float:
    """``base`` halved once for every milestone already reached."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return base * 0.5 ** sum(1 for m in milestones if step >= m)


@dataclass
class EncodedOperator:
    v: np.ndarray
    u: np.ndarray
    grid_u: np.ndarray


def encode_meta(meta: MetaDataset, codec: SpectralCodec) -> list[EncodedOperator]:
    return [EncodedOperator(codec.encode(ds.inputs), codec.encode(ds.outputs), ds.outputs)
            for ds in meta.datasets]


def operator_sampler(encoded: list[EncodedOperator], codec: SpectralCodec,
                     config: TrainConfig) -> Callable[[np.random.Generator], list[Episode]]:
    """Episodes per the meta-training protocol: a random operator, ``query_count``
    queries and a disjoint context whose size is uniform in ``context_range``."""
    lo, hi = config.context_range
    q = config.query_count

    def sample(gen: np.random.Generator) -> list[Episode]:
        eps = []
        for _ in range(config.batch_operators):
            i = int(gen.integers(len(encoded)))
            op = encoded[i]
            top = min(hi, len(op.v) - q)
            if top < lo:
                raise ValueError(f"operator {i} has {len(op.v)} pairs; needs {lo + q}")
            c, qi = split_episode(len(op.v), int(gen.integers(lo, top + 1)), q, gen)
            if config.loss_space == "grid":
                eps.append(Episode(op.v[c], op.u[c], op.v[qi], op.grid_u[qi], codec.synthesis, i))
            else:
                eps.append(Episode(op.v[c], op.u[c], op.v[qi], op.u[qi], None, i))
        return eps

    return sample


@dataclass
class TrainResult:
    params: Params
    state: AdamState
    curve: TrainingCurve
    step: int


def fit(sample: Callable[[np.random.Generator], list[Episode]], model_config: ModelConfig,
        train_config: TrainConfig, total_steps: int, params: Params | None = None,
        state: AdamState | None = None, start_step: int = 0, stop_step: int | None = None,
        callback: Callable[[TrainResult], None] | None = None, callback_every: int = 0) -> TrainResult:
    """Run optimizer steps ``start_step .. stop_step - 1`` of a ``total_steps`` schedule.

    Step ``s`` draws its episodes from its own counter-keyed stream, so a run
    resumed from a checkpoint repeats the uninterrupted run exactly.
    """
    tc = train_config
    if params is None:
        params = init_params(model_config, RngStream(tc.seed, (INIT_STREAM,)))
    state = state or AdamState.zeros(params)
    stop_step = total_steps if stop_step is None else stop_step
    milestones = tc.schedule(total_steps)
    curve = TrainingCurve()
    t0 = time.perf_counter()
    for step in range(start_step, stop_step):
        episodes = sample(RngStream(tc.seed, (TRAIN_STREAM, step)).generator())
        tape = Tape()
        p = bind(tape, params)
        try:
            total = None
            for ep in episodes:
                li = episode_loss(tape, p, model_config, ep)
                total = li if total is None else total + li
            loss = total * (1.0 / len(episodes))
        except NonFiniteError as exc:
            ids = [ep.dataset for ep in episodes]
            raise TrainingError(f"non-finite loss at step {step} (datasets {ids}): {exc}",
                                step, ids[0]) from exc
        grads = tape.backward(loss)
        lr = lr_at(tc.lr, milestones, step)
        params, state = adam_step(params, grads, state, lr, tc.beta1, tc.beta2, tc.eps)
        curve.append(step, float(loss.data), lr, time.perf_counter() - t0)
        if callback is not None and callback_every and (step + 1) % callback_every == 0:
            callback(TrainResult(params, state, curve, step + 1))
    return TrainResult(params, state, curve, stop_step)


def train(meta: MetaDataset, model_config: ModelConfig, train_config: TrainConfig,
          codec: SpectralCodec | None = None, **kwargs) -> TrainResult:
    """Meta-train on an ADR-style meta-dataset (scalar functions on a grid)."""
    if len(meta) < 1:
        raise ValueError("meta-dataset is empty")
    if codec is None:
        codec = SpectralCodec(meta.grid.n, model_config.in_dim // 2)
    if codec.dim != model_config.in_dim or codec.dim != model_config.out_dim:
        raise ad.ShapeError(f"codec dim {codec.dim} vs model dims {model_config.in_dim}/{model_config.out_dim}")
    sample = operator_sampler(encode_meta(meta, codec), codec, train_config)
    total = train_config.total_steps(len(meta))
    return fit(sample, model_config, train_config, total, **kwargs)
