"""Discovery of semantic latent directions from binary attribute labels.

Sample latents, label them (a planted linear rule for self-contained
runs, or an external command fed rendered images), then fit a logistic
classifier by full-batch gradient descent on standardized features.  The
normalized decision-boundary normal, oriented toward the positive class,
is the attribute direction.
"""

from __future__ import annotations

import subprocess
from dataclasses import dataclass

import numpy as np

from .generator import GeneratorSpec, LatentCode, generate, sample_latent
from .jsonio import dump_json, load_json
from .numerics import NonFiniteError
from .semantics import SemanticDirection

__all__ = [
    "DegenerateLabelsError",
    "PlantedLabeler",
    "ExternalCommandLabeler",
    "DirectionDataset",
    "build_dataset",
    "fit_linear_classifier",
    "discover_direction",
]

DEFAULT_EPOCHS = 800
DEFAULT_LR = 0.5


class DegenerateLabelsError(ValueError):
    """All labels landed in one class; no boundary can be fit."""


@dataclass
class PlantedLabeler:
    """Labels a latent by the sign of its projection onto a fixed direction.

    Shortcuts through the latent, so building a dataset with it never
    renders images.
    """

    direction: np.ndarray
    threshold: float = 0.0
    uses_image: bool = False

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(-1)
        if np.linalg.norm(self.direction) < 1e-12:
            raise ValueError("planted labeler direction is numerically zero")
        self.threshold = float(self.threshold)

    def label(self, latent: LatentCode, image: np.ndarray | None = None) -> int:
        return int(float(latent.flatten() @ self.direction) - self.threshold >= 0.0)


@dataclass
class ExternalCommandLabeler:
    """Labels by piping a rendered PNG to a command that prints 0 or 1."""

    command: list[str]
    uses_image: bool = True

    def label(self, latent: LatentCode, image: np.ndarray | None = None) -> int:
        from .pngio import encode_png

        if image is None:
            raise ValueError("external labeler needs a rendered image")
        proc = subprocess.run(
            self.command, input=encode_png(image), stdout=subprocess.PIPE, check=True
        )
        token = proc.stdout.decode().strip().split()
        if not token or token[0] not in ("0", "1"):
            raise ValueError(f"labeler command printed {proc.stdout!r}, expected 0 or 1")
        return int(token[0])


@dataclass
class DirectionDataset:
    """Flattened latents with binary labels, tied to the generator that made them."""

    features: np.ndarray
    labels: np.ndarray
    generator: dict

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels length must match features rows")
        counts = np.bincount(self.labels, minlength=2)
        if len(counts) > 2 or np.any((self.labels != 0) & (self.labels != 1)):
            raise ValueError("labels must be 0 or 1")
        if counts[0] == 0 or counts[1] == 0:
            raise DegenerateLabelsError(
                f"need both classes, got {counts[0]} negatives and {counts[1]} positives"
            )

    @property
    def class_counts(self) -> tuple[int, int]:
        counts = np.bincount(self.labels, minlength=2)
        return int(counts[0]), int(counts[1])

    def to_json_dict(self) -> dict:
        return {
            "features": self.features.tolist(),
            "labels": self.labels.tolist(),
            "generator": self.generator,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "DirectionDataset":
        return cls(
            features=np.asarray(obj["features"], dtype=np.float64),
            labels=np.asarray(obj["labels"], dtype=np.int64),
            generator=obj.get("generator", {}),
        )

    def save(self, path) -> None:
        dump_json(self.to_json_dict(), path)

    @classmethod
    def load(cls, path) -> "DirectionDataset":
        return cls.from_json_dict(load_json(path))


def build_dataset(gen_spec: GeneratorSpec, labeler, n: int, rng) -> DirectionDataset:
    """Sample ``n`` latents and label them; renders only if the labeler looks."""
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    feats = np.empty((n, gen_spec.latent_size))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        w = sample_latent(gen_spec, rng)
        image = generate(gen_spec, w).data if labeler.uses_image else None
        feats[i] = w.flatten()
        labels[i] = labeler.label(w, image)
    return DirectionDataset(feats, labels, gen_spec.to_json_dict())


def fit_linear_classifier(
    dataset: DirectionDataset,
    epochs: int = DEFAULT_EPOCHS,
    lr: float = DEFAULT_LR,
) -> tuple[np.ndarray, float, float]:
    """Logistic regression by full-batch gradient descent.

    Features are standardized per dimension for the fit; the returned
    (normal, bias, accuracy) is mapped back to original coordinates, so
    rescaling any input dimension leaves the decision function unchanged.
    """
    x = dataset.features
    y = dataset.labels.astype(np.float64)
    n, d = x.shape
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.maximum(sd, 1e-12)
    xs = (x - mu) / sd

    w = np.zeros(d)
    b = 0.0
    for _ in range(int(epochs)):
        z = xs @ w + b
        p = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
        resid = p - y
        w -= lr * (xs.T @ resid) / n
        b -= lr * float(resid.mean())
    if not (np.all(np.isfinite(w)) and np.isfinite(b)):
        raise NonFiniteError("classifier weights diverged")

    normal = w / sd
    bias = b - float((w * mu / sd).sum())
    pred = (x @ normal + bias >= 0.0).astype(np.int64)
    accuracy = float((pred == dataset.labels).mean())
    return normal, bias, accuracy


def discover_direction(
    gen_spec: GeneratorSpec,
    labeler,
    name: str,
    n: int = 2000,
    rng=0,
    epochs: int = DEFAULT_EPOCHS,
    lr: float = DEFAULT_LR,
) -> SemanticDirection:
    """Dataset, fit, normalize: the unit normal oriented toward label 1."""
    dataset = build_dataset(gen_spec, labeler, n, rng)
    normal, bias, accuracy = fit_linear_classifier(dataset, epochs=epochs, lr=lr)
    norm = float(np.linalg.norm(normal))
    if norm < 1e-12:
        raise NonFiniteError("classifier normal is numerically zero")
    return SemanticDirection(
        name=name, direction=normal / norm, bias=bias / norm, accuracy=accuracy
    )
