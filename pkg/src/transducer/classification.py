"""Finite-dimensional mode: in-context classification of permuted image tasks.

Each training episode draws a fresh pixel permutation and a fresh class
permutation, so the only way to fit the episode is to read the labels off the
context. Meta-testing uses the identity permutations on held-out images.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, Params
from .random_fields import RngStream
from .baselines import classify_finite
from .training import Episode, TrainConfig, TrainResult, fit, split_episode

EVAL_STREAM = 0xC1A5


@dataclass
class ImageTask:
    images: np.ndarray
    labels: np.ndarray
    n_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} do not pair up")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError(f"labels outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def split(self, n_train: int, seed: int = 0) -> tuple[ImageTask, ImageTask]:
        order = RngStream(seed, (0x5B17,)).generator().permutation(len(self))
        a, b = order[:n_train], order[n_train:]
        return (ImageTask(self.images[a], self.labels[a], self.n_classes),
                ImageTask(self.images[b], self.labels[b], self.n_classes))


def load_digits_task() -> ImageTask:
    """8x8 handwritten digits (1797 images) scaled to [0, 1]."""
    from sklearn.datasets import load_digits

    d = load_digits()
    return ImageTask(d.data / 16.0, d.target, 10)


def load_idx_task(images_path, labels_path) -> ImageTask:
    """User-supplied MNIST-style IDX files; pixels scaled to [0, 1]."""
    from .io import read_idx_images, read_idx_labels

    x = read_idx_images(images_path)
    y = read_idx_labels(labels_path)
    if len(x) != len(y):
        raise ValueError(f"{len(x)} images but {len(y)} labels")
    return ImageTask(x / 255.0, y, 10)


def one_hot(labels, n_classes: int) -> np.ndarray:
    return np.eye(n_classes)[np.asarray(labels)]


def digits_model_config(dim: int = 64, n_classes: int = 10, **overrides) -> ModelConfig:
    """Two layers and no output block, as used for the finite-dimensional task."""
    kw = dict(depth=2, heads=8, head_dim=16, value_dim=16, in_dim=dim, out_dim=n_classes,
              mlp_dim=128, use_G=False)
    kw.update(overrides)
    return ModelConfig(**kw)


def permuted_sampler(task: ImageTask, config: TrainConfig, permute: bool = True):
    """Episodes with fresh pixel and class permutations."""
    lo, hi = config.context_range
    q = config.query_count

    def sample(gen: np.random.Generator) -> list[Episode]:
        eps = []
        for _ in range(config.batch_operators):
            pix = gen.permutation(task.dim) if permute else np.arange(task.dim)
            cls = gen.permutation(task.n_classes) if permute else np.arange(task.n_classes)
            n = int(gen.integers(lo, hi + 1))
            c, qi = split_episode(len(task), n, q, gen)
            x = task.images[:, pix]
            y = one_hot(cls[task.labels], task.n_classes)
            eps.append(Episode(x[c], y[c], x[qi], y[qi]))
        return eps

    return sample


def train_classifier(task: ImageTask, model_config: ModelConfig, train_config: TrainConfig,
                     **kwargs) -> TrainResult:
    if model_config.in_dim != task.dim or model_config.out_dim != task.n_classes:
        raise ValueError(f"model dims {model_config.in_dim}/{model_config.out_dim} vs task "
                         f"{task.dim}/{task.n_classes}")
    return fit(permuted_sampler(task, train_config), model_config, train_config,
               train_config.steps, **kwargs)


@dataclass
class ClassificationReport:
    accuracy: float
    episodes: int
    context_n: int
    query_n: int
    chance: float
    per_episode: list[float]

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def evaluate_classifier(params: Params, config: ModelConfig, task: ImageTask, context_n: int,
                        query_n: int, episodes: int = 20, seed: int = 0,
                        pixel_perm_seed: int | None = None,
                        class_perm_seed: int | None = None) -> ClassificationReport:
    """Accuracy over episodes drawn from ``task``; identity permutations unless seeds are given."""
    pix = np.arange(task.dim)
    cls = np.arange(task.n_classes)
    if pixel_perm_seed is not None:
        pix = RngStream(pixel_perm_seed, (0x9E1,)).generator().permutation(task.dim)
    if class_perm_seed is not None:
        cls = RngStream(class_perm_seed, (0xC15,)).generator().permutation(task.n_classes)
    x = task.images[:, pix]
    y = cls[task.labels]
    accs = []
    for e in range(episodes):
        gen = RngStream(seed, (EVAL_STREAM, e)).generator()
        c, qi = split_episode(len(task), context_n, query_n, gen)
        _, acc = classify_finite(params, config, x[c], one_hot(y[c], task.n_classes), x[qi], y[qi])
        accs.append(acc)
    return ClassificationReport(float(np.mean(accs)), episodes, context_n, query_n,
                                1.0 / task.n_classes, accs)
