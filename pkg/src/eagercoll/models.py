"""Hyperplane regression task: data generation, linear model, loss/gradient."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


@dataclass
class HyperplaneDataset:
    """y = a . x + noise, x ~ U(-1, 1)^dim, noise ~ N(0, sigma^2).

    Split 80/20 into train and validation at generation time.
    """

    a: np.ndarray
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    sigma: float
    seed: int

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    @property
    def n_train(self) -> int:
        return self.x_train.shape[0]


def gen_dataset(dim: int = 64, n: int = 4096, sigma: float = 0.1,
                seed: int = 0) -> HyperplaneDataset:
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(dim)
    x = rng.uniform(-1.0, 1.0, size=(n, dim))
    y = x @ a + sigma * rng.standard_normal(n)
    n_train = int(0.8 * n)
    return HyperplaneDataset(a=a, x_train=x[:n_train], y_train=y[:n_train],
                             x_val=x[n_train:], y_val=y[n_train:],
                             sigma=sigma, seed=seed)


@dataclass
class LinearModel:
    """Prediction w . x; no bias term (the generating plane has none)."""

    w: np.ndarray

    @classmethod
    def init(cls, dim: int, seed: int = 0, scale: float = 0.01) -> "LinearModel":
        rng = np.random.default_rng(seed)
        return cls(w=scale * rng.standard_normal(dim))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w


def loss_and_grad(w: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Mean squared error over the batch and its gradient in w.

    loss = (1/b) sum (w.x - y)^2, grad = (2/b) sum (w.x - y) x.
    """
    r = x @ w - y
    b = x.shape[0]
    loss = float(r @ r) / b
    grad = (2.0 / b) * (x.T @ r)
    return loss, grad


def mse(w: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    r = x @ w - y
    return float(r @ r) / x.shape[0]


def sample_batch(ds: HyperplaneDataset, seed: int, rank: int, step: int,
                 batch: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic per-(rank, step) minibatch from the train split."""
    rng = np.random.default_rng([seed, rank, step])
    idx = rng.integers(0, ds.n_train, size=batch)
    return ds.x_train[idx], ds.y_train[idx]


_DS_MAGIC = b"HYP1"


def save_dataset(path: str, ds: HyperplaneDataset) -> None:
    """Flat binary: 16-byte header (magic, version, dim, n_total), then the
    generating vector, then rows of (x, y) as f64."""
    n = ds.n_train + ds.x_val.shape[0]
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", _DS_MAGIC, 1, ds.dim, n))
        f.write(struct.pack("<dI", ds.sigma, ds.seed))
        ds.a.astype("<f8").tofile(f)
        x = np.vstack([ds.x_train, ds.x_val])
        y = np.concatenate([ds.y_train, ds.y_val])
        np.hstack([x, y[:, None]]).astype("<f8").tofile(f)


def load_dataset(path: str) -> HyperplaneDataset:
    with open(path, "rb") as f:
        magic, version, dim, n = struct.unpack("<4sIII", f.read(16))
        if magic != _DS_MAGIC or version != 1:
            raise ValueError("not a dataset file")
        sigma, seed = struct.unpack("<dI", f.read(12))
        a = np.fromfile(f, dtype="<f8", count=dim)
        rows = np.fromfile(f, dtype="<f8", count=n * (dim + 1)).reshape(n, dim + 1)
    x, y = rows[:, :dim], rows[:, dim]
    n_train = int(0.8 * n)
    return HyperplaneDataset(a=a, x_train=x[:n_train], y_train=y[:n_train],
                             x_val=x[n_train:], y_val=y[n_train:],
                             sigma=sigma, seed=seed)
