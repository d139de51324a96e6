"""Latent-to-image decoders and optimization-based inversion.

The synthetic decoder keeps the whole pipeline self-contained: a fixed,
seeded two-layer smooth map (affine, tanh, affine, sigmoid) whose first
hidden rows are the planted attribute directions, so moving a latent
along one of those directions has a visible, localized image effect.
Externally trained decoders enter through a flat float64 weights file
plus a JSON sidecar describing layer shapes and activations.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .jsonio import dump_json, load_json
from .numerics import Array, GradientTape, NonFiniteError
from .optim import AdamState, adam_step

__all__ = [
    "LatentCode",
    "PlantedDirection",
    "GeneratorSpec",
    "InversionResult",
    "synthetic_spec",
    "generate",
    "sample_latent",
    "invert",
    "save_decoder",
    "export_decoder",
    "save_latent",
    "load_latent",
]

_ACTIVATIONS = ("tanh", "sigmoid", "identity")


@dataclass
class LatentCode:
    """A point in latent space, stored as an (L, d) float64 matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError(f"latent must be 2-D, got shape {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise NonFiniteError("non-finite values in latent")

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def flatten(self) -> np.ndarray:
        return self.matrix.reshape(-1)

    def copy(self) -> "LatentCode":
        return LatentCode(self.matrix.copy())

    def to_json_dict(self) -> dict:
        return {"shape": list(self.matrix.shape), "data": self.matrix.reshape(-1).tolist()}

    @classmethod
    def from_json_dict(cls, obj: dict) -> "LatentCode":
        shape = tuple(int(s) for s in obj["shape"])
        data = np.asarray(obj["data"], dtype=np.float64)
        if data.size != shape[0] * shape[1]:
            raise ValueError(f"latent data length {data.size} does not match shape {shape}")
        return cls(data.reshape(shape))


def save_latent(latent: LatentCode, path) -> None:
    dump_json(latent.to_json_dict(), path)


def load_latent(path) -> LatentCode:
    return LatentCode.from_json_dict(load_json(path))


@dataclass
class PlantedDirection:
    """A named unit direction in flattened latent space."""

    name: str
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"planted direction {self.name!r} must be unit norm, got {norm}")


@dataclass
class GeneratorSpec:
    """Identity of a decoder: where its weights come from and its geometry.

    kind "synthetic" derives weights deterministically from ``seed``;
    kind "decoder-file" loads them from ``weights_path`` (with a JSON
    sidecar at ``weights_path + ".json"``).  Output is (H, W, 3) with H
    and W multiples of 8 so the block transform downstream always fits.
    """

    kind: str = "synthetic"
    latent_shape: tuple[int, int] = (8, 32)
    output_shape: tuple[int, int, int] = (64, 64, 3)
    seed: int = 0
    weights_path: str | None = None
    planted: list[PlantedDirection] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("synthetic", "decoder-file"):
            raise ValueError(f"unknown generator kind {self.kind!r}")
        self.latent_shape = tuple(int(v) for v in self.latent_shape)
        self.output_shape = tuple(int(v) for v in self.output_shape)
        L, d = self.latent_shape
        H, W, C = self.output_shape
        if L < 1 or d < 1:
            raise ValueError(f"bad latent shape {self.latent_shape}")
        if C != 3:
            raise ValueError(f"output must have 3 channels, got {C}")
        if H % 8 != 0 or W % 8 != 0:
            raise ValueError(f"output sides must be multiples of 8, got {(H, W)}")
        if self.kind == "decoder-file" and not self.weights_path:
            raise ValueError("decoder-file spec needs weights_path")
        names = [p.name for p in self.planted]
        if len(set(names)) != len(names):
            raise ValueError(f"planted direction names must be distinct, got {names}")
        n = L * d
        for p in self.planted:
            if p.vector.size != n:
                raise ValueError(
                    f"planted direction {p.name!r} has length {p.vector.size}, latent needs {n}"
                )

    @property
    def latent_size(self) -> int:
        return self.latent_shape[0] * self.latent_shape[1]

    def planted_by_name(self, name: str) -> PlantedDirection:
        for p in self.planted:
            if p.name == name:
                return p
        raise KeyError(f"no planted direction named {name!r}")

    def cache_key(self) -> tuple:
        digest = hashlib.sha256()
        for p in self.planted:
            digest.update(p.name.encode())
            digest.update(p.vector.tobytes())
        extra: tuple = ()
        if self.kind == "decoder-file":
            st = Path(self.weights_path).stat()
            extra = (self.weights_path, st.st_size, st.st_mtime_ns)
        return (self.kind, self.latent_shape, self.output_shape, self.seed, digest.hexdigest()) + extra

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "latent_shape": list(self.latent_shape),
            "output_shape": list(self.output_shape),
            "seed": self.seed,
            "weights_path": self.weights_path,
            "planted": [
                {"name": p.name, "direction": p.vector.tolist()} for p in self.planted
            ],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "GeneratorSpec":
        return cls(
            kind=obj.get("kind", "synthetic"),
            latent_shape=tuple(obj["latent_shape"]),
            output_shape=tuple(obj["output_shape"]),
            seed=int(obj.get("seed", 0)),
            weights_path=obj.get("weights_path"),
            planted=[
                PlantedDirection(p["name"], np.asarray(p["direction"], dtype=np.float64))
                for p in obj.get("planted", [])
            ],
        )


def synthetic_spec(
    seed: int = 0,
    latent_shape: tuple[int, int] = (8, 32),
    output_shape: tuple[int, int, int] = (64, 64, 3),
    attribute_names: tuple[str, ...] = ("attr0", "attr1", "attr2"),
) -> GeneratorSpec:
    """Build a synthetic spec with seeded orthonormal planted directions."""
    n = latent_shape[0] * latent_shape[1]
    if len(attribute_names) > n:
        raise ValueError("more attributes than latent dimensions")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 17]))
    planted: list[PlantedDirection] = []
    if attribute_names:
        raw = rng.standard_normal((n, len(attribute_names)))
        q, _ = np.linalg.qr(raw)
        planted = [
            PlantedDirection(name, q[:, i].copy()) for i, name in enumerate(attribute_names)
        ]
    return GeneratorSpec(
        kind="synthetic",
        latent_shape=latent_shape,
        output_shape=output_shape,
        seed=int(seed),
        planted=planted,
    )


# ---------------------------------------------------------------------------
# decoder runtime


class _DecoderRuntime:
    """Materialized layer weights, shared across calls via a cache."""

    def __init__(self, layers: list[tuple[np.ndarray, np.ndarray, str]], spec: GeneratorSpec):
        n_in = spec.latent_size
        for i, (w, b, act) in enumerate(layers):
            if act not in _ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {act!r}")
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: inconsistent shapes {w.shape} / {b.shape}")
            if w.shape[1] != n_in:
                raise ValueError(f"layer {i}: expects input {w.shape[1]}, got {n_in}")
            n_in = w.shape[0]
        H, W, C = spec.output_shape
        if n_in != H * W * C:
            raise ValueError(f"decoder output size {n_in} does not match image {spec.output_shape}")
        if layers[-1][2] != "sigmoid":
            raise ValueError("final decoder activation must be sigmoid to keep outputs in [0, 1]")
        self.layers = layers

    def forward(self, x: Array) -> Array:
        h = x
        for w, b, act in self.layers:
            h = nm.matmul(nm.constant(w), h) + nm.constant(b)
            if act == "tanh":
                h = nm.tanh(h)
            elif act == "sigmoid":
                h = nm.sigmoid(h)
        return h


def _hidden_width(latent_size: int) -> int:
    return max(8, min(256, latent_size // 4))


def _synthetic_layers(spec: GeneratorSpec) -> list[tuple[np.ndarray, np.ndarray, str]]:
    n = spec.latent_size
    H, W, C = spec.output_shape
    npix = H * W * C
    nh = _hidden_width(n)
    if len(spec.planted) > nh:
        raise ValueError("more planted directions than hidden units")
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 29]))
    # background rows sit in the quasi-linear tanh regime; planted rows get
    # unit gain so a few-sigma push along an attribute saturates visibly
    w1 = rng.standard_normal((nh, n))
    w1 /= np.linalg.norm(w1, axis=1, keepdims=True)
    w1 *= 0.55
    for i, p in enumerate(spec.planted):
        w1[i] = 1.3 * p.vector
    b1 = np.zeros(nh)
    w2 = rng.standard_normal((npix, nh)) * (2.0 / np.sqrt(nh))
    b2 = rng.normal(0.0, 0.5, size=npix)
    return [(w1, b1, "tanh"), (w2, b2, "sigmoid")]


def _load_decoder_file(spec: GeneratorSpec) -> list[tuple[np.ndarray, np.ndarray, str]]:
    path = Path(spec.weights_path)
    sidecar = load_json(str(path) + ".json")
    if tuple(sidecar["latent_shape"]) != spec.latent_shape:
        raise ValueError(
            f"decoder file latent shape {sidecar['latent_shape']} != spec {list(spec.latent_shape)}"
        )
    if tuple(sidecar["output_shape"]) != spec.output_shape:
        raise ValueError(
            f"decoder file output shape {sidecar['output_shape']} != spec {list(spec.output_shape)}"
        )
    raw = np.fromfile(path, dtype="<f8")
    layers: list[tuple[np.ndarray, np.ndarray, str]] = []
    offset = 0
    for entry in sidecar["layers"]:
        rows, cols = int(entry["rows"]), int(entry["cols"])
        need = rows * cols + rows
        if offset + need > raw.size:
            raise ValueError("decoder weights file shorter than sidecar describes")
        w = raw[offset : offset + rows * cols].reshape(rows, cols).copy()
        b = raw[offset + rows * cols : offset + need].copy()
        offset += need
        layers.append((w, b, str(entry["activation"])))
    if offset != raw.size:
        raise ValueError(f"decoder weights file has {raw.size - offset} trailing values")
    return layers


def save_decoder(
    path,
    layers: list[tuple[np.ndarray, np.ndarray, str]],
    latent_shape: tuple[int, int],
    output_shape: tuple[int, int, int],
) -> None:
    """Write weights as a flat little-endian float64 stream plus sidecar."""
    chunks = []
    sidecar_layers = []
    for w, b, act in layers:
        chunks.append(np.asarray(w, dtype="<f8").reshape(-1))
        chunks.append(np.asarray(b, dtype="<f8").reshape(-1))
        sidecar_layers.append({"rows": int(w.shape[0]), "cols": int(w.shape[1]), "activation": act})
    np.concatenate(chunks).astype("<f8").tofile(path)
    dump_json(
        {
            "latent_shape": list(latent_shape),
            "output_shape": list(output_shape),
            "layers": sidecar_layers,
        },
        str(path) + ".json",
    )


def export_decoder(spec: GeneratorSpec, path) -> GeneratorSpec:
    """Materialize a spec's weights into a decoder file; returns the file-backed spec."""
    runtime = _runtime(spec)
    save_decoder(path, runtime.layers, spec.latent_shape, spec.output_shape)
    return GeneratorSpec(
        kind="decoder-file",
        latent_shape=spec.latent_shape,
        output_shape=spec.output_shape,
        seed=spec.seed,
        weights_path=str(path),
        planted=list(spec.planted),
    )


_RUNTIME_CACHE: dict[tuple, _DecoderRuntime] = {}


def _runtime(spec: GeneratorSpec) -> _DecoderRuntime:
    key = spec.cache_key()
    runtime = _RUNTIME_CACHE.get(key)
    if runtime is None:
        if spec.kind == "synthetic":
            layers = _synthetic_layers(spec)
        else:
            layers = _load_decoder_file(spec)
        runtime = _DecoderRuntime(layers, spec)
        if len(_RUNTIME_CACHE) > 32:
            _RUNTIME_CACHE.clear()
        _RUNTIME_CACHE[key] = runtime
    return runtime


# ---------------------------------------------------------------------------
# public ops


def _latent_array(spec: GeneratorSpec, w) -> Array:
    if isinstance(w, LatentCode):
        arr = nm.constant(w.matrix)
    elif isinstance(w, Array):
        arr = w
    else:
        arr = nm.constant(np.asarray(w, dtype=np.float64))
    if arr.shape != spec.latent_shape:
        raise ValueError(f"latent shape {arr.shape} != spec latent shape {spec.latent_shape}")
    return arr


def generate(spec: GeneratorSpec, w) -> Array:
    """Decode a latent into an (H, W, 3) image with values in [0, 1].

    Differentiable in ``w`` when ``w`` is a tracked Array on the active
    tape; LatentCode or ndarray input gives a plain value computation.
    """
    arr = _latent_array(spec, w)
    runtime = _runtime(spec)
    flat = runtime.forward(arr.flatten())
    return flat.reshape(spec.output_shape)


def sample_latent(spec: GeneratorSpec, rng) -> LatentCode:
    """Draw a standard-normal latent using the given Generator or seed."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return LatentCode(rng.standard_normal(spec.latent_shape))


@dataclass
class InversionResult:
    """Best latent found, its reconstruction loss, and the loss trace."""

    latent: LatentCode
    loss: float
    trace: list[float]


def invert(
    spec: GeneratorSpec,
    target,
    iterations: int = 2000,
    lr: float = 0.05,
    seed: int = 0,
    init: LatentCode | None = None,
) -> InversionResult:
    """Recover a latent whose decoding matches ``target``.

    Minimizes the squared Frobenius distance between the decoded image
    and the target with Adam, starting from ``init`` or a seeded normal
    draw, and returns the best evaluated iterate.
    """
    target_data = target.data if isinstance(target, Array) else np.asarray(target, dtype=np.float64)
    if target_data.shape != spec.output_shape:
        raise ValueError(f"target shape {target_data.shape} != generator output {spec.output_shape}")
    if iterations < 0:
        raise ValueError(f"iterations must be >= 0, got {iterations}")
    target_const = nm.constant(target_data)

    if init is not None:
        if init.shape != spec.latent_shape:
            raise ValueError(f"init shape {init.shape} != latent shape {spec.latent_shape}")
        w_val = init.matrix.copy()
    else:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
        w_val = rng.standard_normal(spec.latent_shape)

    def eval_loss(w_np: np.ndarray) -> float:
        return nm.sqnorm(generate(spec, w_np) - target_const).item()

    if iterations == 0:
        loss = eval_loss(w_val)
        return InversionResult(LatentCode(w_val), loss, [])

    state = AdamState.init(w_val)
    best_loss = np.inf
    best_w = w_val.copy()
    trace: list[float] = []
    for t in range(1, iterations + 1):
        leaf = nm.array(state.params, requires_grad=True)
        with GradientTape() as tape:
            loss = nm.sqnorm(generate(spec, leaf) - target_const)
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"invert: non-finite loss at iteration {t}")
        trace.append(value)
        if value < best_loss:
            best_loss = value
            best_w = state.params.copy()
        tape.backward(loss)
        state = adam_step(state, leaf.grad, lr=lr, t=t)
    return InversionResult(LatentCode(best_w), float(best_loss), trace)
