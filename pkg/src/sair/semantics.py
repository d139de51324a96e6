"""Semantic guidance: embeddings, masks, and the three prior losses.

The identity loss compares face embeddings between the reference and the
current decoded image and anchors the latent near the reference latent.
The emotion loss steers the latent along a learned attribute direction.
The histogram loss matches mask-weighted color distributions through a
soft, differentiable histogram.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nm
from .generator import GeneratorSpec, LatentCode, generate
from .numerics import Array

__all__ = [
    "DegenerateEmbeddingError",
    "Embedding",
    "EmbedderSpec",
    "SemanticDirection",
    "MaskProvider",
    "FullMask",
    "FileMask",
    "LumaThresholdMask",
    "mask_provider_from_config",
    "register_external_embedder",
    "embed",
    "embedding_similarity",
    "identity_loss",
    "emotion_loss",
    "soft_histogram",
    "hist_loss",
]


class DegenerateEmbeddingError(ValueError):
    """The pre-normalization embedding vector is numerically zero."""


@dataclass
class Embedding:
    """A unit-norm embedding plus its differentiable pre-normalization features.

    ``vector`` is the detached unit vector.  ``features`` points at the
    same direction before normalization and carries the tape connection;
    inner products against unit references go through cosine similarity
    on the features, which equals the inner product of unit embeddings.
    """

    vector: np.ndarray
    features: Array | None = None


@dataclass
class EmbedderSpec:
    """Which embedding network stands in for the recognition model.

    kind "toy": bilinear resize to ``resolution``, a seeded fixed random
    linear map to ``dim`` features, tanh, then L2 normalization.  The
    map's rows are centered per color channel, so uniform lighting
    shifts cancel out before the nonlinearity.  kind "external": a
    callable registered under ``name`` via
    :func:`register_external_embedder`.
    """

    kind: str = "toy"
    resolution: int = 16
    dim: int = 16
    seed: int = 0
    name: str | None = None

    def __post_init__(self):
        if self.kind not in ("toy", "external"):
            raise ValueError(f"unknown embedder kind {self.kind!r}")
        self.resolution = int(self.resolution)
        self.dim = int(self.dim)
        if self.resolution < 1 or self.dim < 1:
            raise ValueError("embedder resolution and dim must be positive")
        if self.kind == "external" and not self.name:
            raise ValueError("external embedder spec needs a registry name")

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "resolution": self.resolution,
            "dim": self.dim,
            "seed": self.seed,
            "name": self.name,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "EmbedderSpec":
        return cls(
            kind=obj.get("kind", "toy"),
            resolution=int(obj.get("resolution", 16)),
            dim=int(obj.get("dim", 16)),
            seed=int(obj.get("seed", 0)),
            name=obj.get("name"),
        )


_EXTERNAL_EMBEDDERS: dict[str, Callable] = {}


def register_external_embedder(name: str, fn: Callable) -> None:
    """Register a callable mapping a resized image Array to a feature Array."""
    _EXTERNAL_EMBEDDERS[name] = fn


_TOY_WEIGHTS: dict[tuple, np.ndarray] = {}


def _toy_weights(spec: EmbedderSpec) -> np.ndarray:
    key = (spec.resolution, spec.dim, spec.seed)
    w = _TOY_WEIGHTS.get(key)
    if w is None:
        rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 41]))
        pixels = spec.resolution * spec.resolution
        n = pixels * 3
        w = rng.standard_normal((spec.dim, n)) / np.sqrt(n)
        # center each row per channel: a uniform shift of any channel then
        # maps to zero, so features ignore global lighting changes
        per_channel = w.reshape(spec.dim, pixels, 3)
        w = (per_channel - per_channel.mean(axis=1, keepdims=True)).reshape(spec.dim, n)
        if len(_TOY_WEIGHTS) > 32:
            _TOY_WEIGHTS.clear()
        _TOY_WEIGHTS[key] = w
    return w


def _features(spec: EmbedderSpec, image) -> Array:
    img = image if isinstance(image, Array) else nm.constant(np.asarray(image, dtype=np.float64))
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"embed: need an (H, W, 3) image, got shape {img.shape}")
    resized = nm.resize_bilinear(img, (spec.resolution, spec.resolution))
    if spec.kind == "toy":
        return nm.tanh(nm.matmul(nm.constant(_toy_weights(spec)), resized.flatten()))
    fn = _EXTERNAL_EMBEDDERS.get(spec.name)
    if fn is None:
        raise KeyError(f"no external embedder registered under {spec.name!r}")
    return fn(resized)


def embed(spec: EmbedderSpec, image) -> Embedding:
    """Embed an image; unit-norm vector plus tape-connected features.

    Raises DegenerateEmbeddingError when the pre-normalization feature
    vector is numerically zero.
    """
    feats = _features(spec, image)
    norm = float(np.linalg.norm(feats.data))
    if norm < 1e-12:
        raise DegenerateEmbeddingError("embedding features are numerically zero")
    return Embedding(vector=feats.data / norm, features=feats)


def embedding_similarity(spec: EmbedderSpec, image, reference: np.ndarray | Embedding) -> Array:
    """Differentiable inner product between unit embeddings.

    Equals <T(image), T(reference)> because cosine similarity of the raw
    features is invariant to their normalization.
    """
    ref = reference.vector if isinstance(reference, Embedding) else np.asarray(reference, float)
    feats = _features(spec, image)
    return nm.cosine_similarity(feats, nm.constant(ref))


@dataclass
class SemanticDirection:
    """A named unit direction in flattened latent space with its classifier bias."""

    name: str
    direction: np.ndarray
    bias: float = 0.0
    accuracy: float | None = None

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(-1)
        norm = float(np.linalg.norm(self.direction))
        if norm < 1e-12:
            raise nm.DegenerateVectorError(f"direction {self.name!r} is numerically zero")
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"direction {self.name!r} must be unit norm, got {norm}")

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "direction": self.direction.tolist(),
            "bias": float(self.bias),
            "accuracy": None if self.accuracy is None else float(self.accuracy),
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "SemanticDirection":
        return cls(
            name=obj["name"],
            direction=np.asarray(obj["direction"], dtype=np.float64),
            bias=float(obj.get("bias", 0.0)),
            accuracy=obj.get("accuracy"),
        )


# ---------------------------------------------------------------------------
# losses


def identity_loss(
    w,
    guide: LatentCode,
    guide_embedding: Embedding,
    gen_spec: GeneratorSpec,
    emb_spec: EmbedderSpec,
    anchor_weight: float = 0.001,
) -> Array:
    """1 - <T(reference), T(G(w))> plus an anchor pulling w toward the guide.

    ``guide`` is the latent recovered from the reference image; the
    anchor term is ``anchor_weight * ||w - guide||_F^2``.
    """
    w_arr = w if isinstance(w, Array) else nm.constant(w.matrix if isinstance(w, LatentCode) else w)
    image = generate(gen_spec, w_arr)
    cos = embedding_similarity(emb_spec, image, guide_embedding)
    anchor = nm.sqnorm(w_arr - nm.constant(guide.matrix))
    return (1.0 - cos) + nm.scale(anchor, float(anchor_weight))


def emotion_loss(w, direction: SemanticDirection | np.ndarray, step: float = 1.0) -> Array:
    """1 - cos(flatten(w) + step * dir, dir): alignment after one step."""
    d = direction.direction if isinstance(direction, SemanticDirection) else np.asarray(direction, float)
    w_arr = w if isinstance(w, Array) else nm.constant(w.matrix if isinstance(w, LatentCode) else w)
    shifted = w_arr.flatten() + nm.constant(float(step) * d)
    return 1.0 - nm.cosine_similarity(shifted, nm.constant(d))


_VALUE_SLACK = 0.05


def soft_histogram(values, weights, bins: int, bandwidth: float | None = None) -> Array:
    """Weighted soft histogram over [0, 1], normalized to sum 1.

    Each value spreads its weight over the bin centers at (j + 0.5)/bins
    with a triangular kernel of half-width ``bandwidth`` (default
    1/bins), renormalized per value so no mass is lost at the edges.  At
    the default bandwidth this is exact linear interpolation between the
    two nearest centers, and shrinking the bandwidth recovers hard
    nearest-center binning.  Differentiable in values and weights.
    """
    K = int(bins)
    if K < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    b = 1.0 / K if bandwidth is None else float(bandwidth)
    if b <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    vals = values if isinstance(values, Array) else nm.constant(np.asarray(values, dtype=np.float64))
    wts = weights if isinstance(weights, Array) else nm.constant(np.asarray(weights, dtype=np.float64))
    if vals.ndim != 1 or wts.ndim != 1 or vals.shape != wts.shape:
        raise ValueError(
            f"values and weights must be equal-length vectors, got {vals.shape} and {wts.shape}"
        )
    v = vals.data
    wt = wts.data
    if np.any(wt < 0):
        raise ValueError("weights must be nonnegative")
    if v.min() < -_VALUE_SLACK or v.max() > 1.0 + _VALUE_SLACK:
        raise ValueError(f"values must lie in [0, 1] (+/- {_VALUE_SLACK}), got [{v.min()}, {v.max()}]")

    centers = (np.arange(K) + 0.5) / K
    delta = v[:, None] - centers[None, :]
    phi = np.maximum(0.0, 1.0 - np.abs(delta) / b)
    support = phi.sum(axis=1)
    if np.any(support <= 0.0):
        raise ValueError("bandwidth too small: some values reach no bin center")
    assign = phi / support[:, None]
    total = float(wt.sum())
    if total <= 0.0:
        raise ValueError("weights sum to zero")
    hist = (wt @ assign) / total

    def backward(g):
        gv = gw = None
        if vals.requires_grad:
            dphi = np.where(np.abs(delta) < b, -np.sign(delta) / b, 0.0)
            dsupport = dphi.sum(axis=1)
            dassign = (dphi * support[:, None] - phi * dsupport[:, None]) / (support[:, None] ** 2)
            gv = (wt / total) * (dassign @ g)
        if wts.requires_grad:
            gw = (assign @ g - float(g @ hist)) / total
        return (gv, gw)

    return nm.record_op(hist, (vals, wts), backward)


def hist_loss(img_a, mask_a, img_b, mask_b, bins: int = 16) -> Array:
    """Mean L1 distance between mask-weighted color CDFs.

    Per channel: soft histograms of both images with their masks as
    per-pixel weights, cumulative sums, mean absolute CDF gap scaled by
    1/bins, averaged over the three channels.  Insensitive to image
    resolution because histograms normalize to unit mass.
    """
    a = img_a if isinstance(img_a, Array) else nm.constant(np.asarray(img_a, dtype=np.float64))
    bimg = img_b if isinstance(img_b, Array) else nm.constant(np.asarray(img_b, dtype=np.float64))
    for name, img in (("img_a", a), ("img_b", bimg)):
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"hist_loss: {name} must be (H, W, 3), got shape {img.shape}")
    ma = np.asarray(mask_a, dtype=np.float64)
    mb = np.asarray(mask_b, dtype=np.float64)
    if ma.shape != a.shape[:2]:
        raise ValueError(f"hist_loss: mask_a shape {ma.shape} != image {a.shape[:2]}")
    if mb.shape != bimg.shape[:2]:
        raise ValueError(f"hist_loss: mask_b shape {mb.shape} != image {bimg.shape[:2]}")
    if ma.sum() <= 0 or mb.sum() <= 0:
        raise ValueError("hist_loss: mask total weight must be positive")
    K = int(bins)
    wa = nm.constant(ma.reshape(-1))
    wb = nm.constant(mb.reshape(-1))
    terms = []
    for c in range(3):
        ha = soft_histogram(nm.channel(a, c).flatten(), wa, K)
        hb = soft_histogram(nm.channel(bimg, c).flatten(), wb, K)
        gap = (nm.cumsum(ha) - nm.cumsum(hb)).abs().sum()
        terms.append(nm.scale(gap, 1.0 / K))
    return nm.scale(terms[0] + terms[1] + terms[2], 1.0 / 3.0)


# ---------------------------------------------------------------------------
# masks


class MaskProvider:
    """Produces per-pixel weights in [0, 1] for an image."""

    def mask_for(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _validated(self, mask: np.ndarray) -> np.ndarray:
        if mask.sum() <= 0:
            raise ValueError("mask has zero total weight")
        return mask


class FullMask(MaskProvider):
    def mask_for(self, image: np.ndarray) -> np.ndarray:
        return np.ones(np.asarray(image).shape[:2])


class FileMask(MaskProvider):
    """Weights loaded from a single-channel 8-bit PNG, resized on demand."""

    def __init__(self, path: str):
        self.path = str(path)
        self._mask: np.ndarray | None = None

    def _load(self) -> np.ndarray:
        if self._mask is None:
            from .pngio import read_mask

            self._mask = read_mask(self.path)
        return self._mask

    def mask_for(self, image: np.ndarray) -> np.ndarray:
        mask = self._load()
        shape = np.asarray(image).shape[:2]
        if mask.shape != shape:
            mask = nm.resize_bilinear(nm.constant(mask), shape).data
        return self._validated(np.clip(mask, 0.0, 1.0))


class LumaThresholdMask(MaskProvider):
    """Binary mask: 1 where BT.601 luma exceeds the threshold."""

    def __init__(self, threshold: float):
        self.threshold = float(threshold)

    def mask_for(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        luma = img[:, :, 0] * 0.299 + img[:, :, 1] * 0.587 + img[:, :, 2] * 0.114
        return self._validated((luma > self.threshold).astype(np.float64))


def mask_provider_from_config(obj: dict | None) -> MaskProvider:
    if obj is None:
        return FullMask()
    kind = obj.get("kind", "full")
    if kind == "full":
        return FullMask()
    if kind == "file":
        return FileMask(obj["path"])
    if kind == "luma-threshold":
        return LumaThresholdMask(obj["threshold"])
    raise ValueError(f"unknown mask kind {kind!r}")
