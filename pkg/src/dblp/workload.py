"""Gradient sources: norm-scripted synthetic gradients and a softmax-regression toy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NormProfile:
    """Piecewise-constant target norm: ``((first_step, last_step, norm), ...)``."""

    segments: tuple[tuple[int, int, float], ...]

    def __post_init__(self):
        segs = tuple(sorted((int(a), int(b), float(x)) for a, b, x in self.segments))
        if not segs:
            raise ValueError("empty norm profile")
        for (a, b, x), nxt in zip(segs, segs[1:] + (None,)):
            if b < a or x <= 0:
                raise ValueError(f"bad profile segment {(a, b, x)}")
            if nxt is not None and nxt[0] != b + 1:
                raise ValueError(f"profile segments must be contiguous: {b} then {nxt[0]}")
        if segs[0][0] != 0:
            raise ValueError("profile must start at step 0")
        object.__setattr__(self, "segments", segs)

    @classmethod
    def parse(cls, text: str) -> NormProfile:
        """``"0-19:10, 20-39:4"``"""
        segs = []
        for part in text.split(","):
            span, norm = part.strip().split(":")
            a, b = span.split("-")
            segs.append((int(a), int(b), float(norm)))
        return cls(tuple(segs))

    @classmethod
    def constant(cls, steps: int, norm: float = 1.0) -> NormProfile:
        return cls(((0, steps - 1, norm),))

    @property
    def last_step(self) -> int:
        return self.segments[-1][1]

    def target(self, step: int) -> float:
        for a, b, x in self.segments:
            if a <= step <= b:
                return x
        raise ValueError(f"step {step} outside the profile")

    def __str__(self) -> str:
        return ", ".join(f"{a}-{b}:{x:g}" for a, b, x in self.segments)


def synth_gradient(step: int, profile: NormProfile, layout, seed: int) -> list[np.ndarray]:
    """Seeded zero-mean uniform tensors rescaled so the global L2 norm hits the profile."""
    target = profile.target(step)
    counts = [int(c) for _, c in layout]
    rng = np.random.default_rng([seed & 0xFFFFFFFF, step])
    flat = rng.random(sum(counts), dtype=np.float32)
    flat -= np.float32(0.5)
    # second pass absorbs the float32 rounding of the first scale
    for _ in range(2):
        f64 = flat.astype(np.float64)
        flat *= np.float32(target / np.sqrt(f64 @ f64))
    return np.split(flat, np.cumsum(counts)[:-1])


@dataclass
class BlobDataset:
    x: np.ndarray
    y: np.ndarray
    classes: int

    def __len__(self) -> int:
        return len(self.y)

    def batch(self, size: int, seed: int, step: int) -> tuple[np.ndarray, np.ndarray]:
        idx = np.random.default_rng([seed & 0xFFFFFFFF, step]).choice(len(self.y), size=min(size, len(self.y)),
                                                                      replace=False)
        return self.x[idx], self.y[idx]


def blob_centers(classes: int, features: int, separation: float, seed: int) -> np.ndarray:
    """Class centers pairwise ``separation`` apart (unit noise scale), randomly rotated."""
    if classes > features:
        raise ValueError("need at least as many features as classes")
    q, _ = np.linalg.qr(np.random.default_rng([seed & 0xFFFFFFFF, 0xB10B]).standard_normal((features, features)))
    return (separation / np.sqrt(2.0)) * q[:classes]


def make_blobs(n: int, classes: int = 3, features: int = 10, separation: float = 6.0, *,
               center_seed: int = 0, seed: int = 0) -> BlobDataset:
    centers = blob_centers(classes, features, separation, center_seed)
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0xDA7A])
    y = rng.integers(0, classes, size=n)
    x = centers[y] + rng.standard_normal((n, features))
    return BlobDataset(x.astype(np.float32), y.astype(np.int64), classes)


@dataclass
class ToyModel:
    weight: np.ndarray
    bias: np.ndarray
    lr: float = 0.1

    @classmethod
    def init(cls, classes: int, features: int, lr: float = 0.1, seed: int = 0) -> ToyModel:
        rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x1417])
        w = (0.01 * rng.standard_normal((classes, features))).astype(np.float32)
        return cls(w, np.zeros(classes, dtype=np.float32), lr)

    @property
    def layout(self) -> tuple[tuple[str, int], ...]:
        return (("weight", self.weight.size), ("bias", self.bias.size))

    def tensors(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def apply(self, grads) -> None:
        """SGD step ``w <- w - lr * g`` in float32."""
        lr = np.float32(self.lr)
        gw, gb = (np.asarray(g, dtype=np.float32) for g in grads)
        self.weight = self.weight - lr * gw.reshape(self.weight.shape)
        self.bias = self.bias - lr * gb.reshape(self.bias.shape)

    def copy(self) -> ToyModel:
        return ToyModel(self.weight.copy(), self.bias.copy(), self.lr)


def _probs(model: ToyModel, x: np.ndarray) -> np.ndarray:
    logits = x.astype(np.float64) @ model.weight.astype(np.float64).T + model.bias.astype(np.float64)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def toy_loss(model: ToyModel, x: np.ndarray, y: np.ndarray) -> float:
    p = _probs(model, x)
    return float(-np.mean(np.log(p[np.arange(len(y)), y])))


def toy_grad(model: ToyModel, x: np.ndarray, y: np.ndarray) -> list[np.ndarray]:
    """Mean softmax cross-entropy gradient ``[dW, db]`` as float32."""
    if len(y) == 0:
        raise ValueError("empty batch")
    delta = _probs(model, x)
    delta[np.arange(len(y)), y] -= 1.0
    delta /= len(y)
    gw = delta.T @ x.astype(np.float64)
    gb = delta.sum(axis=0)
    return [gw.astype(np.float32).ravel(), gb.astype(np.float32)]


def toy_eval(model: ToyModel, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(_probs(model, x), axis=1) == y))


class SyntheticWorker:
    """Emits profile-scripted gradients and keeps the last mean it received."""

    def __init__(self, layout, profile: NormProfile, seed: int):
        self.layout = tuple((str(n), int(c)) for n, c in layout)
        self.profile = profile
        self.seed = seed
        self.last_mean: list[np.ndarray] | None = None

    def gradient(self, step: int) -> list[np.ndarray]:
        return synth_gradient(step, self.profile, self.layout, self.seed)

    def apply(self, mean) -> None:
        self.last_mean = mean


class ToyWorker:
    """Softmax regression trained on its own seeded minibatches."""

    def __init__(self, model: ToyModel, data: BlobDataset, batch_size: int, seed: int):
        self.model = model
        self.data = data
        self.batch_size = batch_size
        self.seed = seed

    @property
    def layout(self):
        return self.model.layout

    def gradient(self, step: int) -> list[np.ndarray]:
        return toy_grad(self.model, *self.data.batch(self.batch_size, self.seed, step))

    def apply(self, mean) -> None:
        self.model.apply(mean)
