"""Central-finite-difference verification of every analytic gradient.

Each check builds a scalar function of one flat input vector, computes
the tape gradient, and compares against central differences at 10
seeded points.  Inputs are drawn away from the few genuine kinks
(absolute value at 0, soft rounding at half-integers, histogram kernel
at bin centers) so the comparison tests the analytic formulas, not the
nondifferentiable set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .degradation import DegradationSpec, degrade, gaussian_kernel, soft_jpeg
from .generator import LatentCode, generate, synthetic_spec
from .numerics import Array, GradientTape
from .restore import RestoreConfig, RestoreContext, total_loss
from .semantics import (
    EmbedderSpec,
    FullMask,
    SemanticDirection,
    embed,
    embedding_similarity,
    emotion_loss,
    hist_loss,
    identity_loss,
    soft_histogram,
)

__all__ = ["CheckResult", "run_checks", "MODULES"]

DEFAULT_POINTS = 10
DEFAULT_STEP = 1e-5
OP_TOLERANCE = 1e-4
OBJECTIVE_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    module: str
    points: int
    max_rel_err: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= self.tolerance


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(
        float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-8
    )
    return float(np.max(np.abs(analytic - numeric))) / scale


def _numeric_gradient(fn, x0: np.ndarray, h: float) -> np.ndarray:
    grad = np.zeros_like(x0)
    flat = grad.reshape(-1)
    base = x0.copy()
    view = base.reshape(-1)
    for i in range(view.size):
        keep = view[i]
        view[i] = keep + h
        hi = fn(base)
        view[i] = keep - h
        lo = fn(base)
        view[i] = keep
        flat[i] = (hi - lo) / (2.0 * h)
    return grad


def _check_point(build, rng: np.random.Generator, h: float) -> float:
    fn_tape, x0 = build(rng)
    leaf = nm.array(x0, requires_grad=True)
    with GradientTape() as tape:
        out = fn_tape(leaf)
    tape.backward(out)
    analytic = leaf.grad

    def fn_value(x: np.ndarray) -> float:
        return fn_tape(nm.constant(x.copy())).item()

    numeric = _numeric_gradient(fn_value, x0, h)
    return _relative_error(analytic, numeric)


# ---------------------------------------------------------------------------
# check constructions; every build returns (scalar function of an Array, x0)


def _away_from_half_integers(rng: np.random.Generator, shape) -> np.ndarray:
    base = rng.integers(-3, 4, size=shape).astype(np.float64)
    offs = rng.uniform(0.05, 0.45, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return base + offs


def _hist_safe_values(rng: np.random.Generator, n: int, bins: int) -> np.ndarray:
    idx = rng.integers(0, bins, size=n)
    offs = rng.uniform(0.1, 0.4, size=n) * rng.choice([-1.0, 1.0], size=n)
    return (idx + 0.5 + offs) / bins


def _build_arith(rng):
    c1 = rng.normal(size=(3, 4))
    c2 = rng.normal(size=(3, 4))
    v = rng.normal(size=(3, 4))
    x0 = rng.normal(size=(3, 4))

    def fn(x):
        return ((x + nm.constant(c1)) * (x - nm.constant(c2)) * nm.constant(v)).sum()

    return fn, x0


def _build_scale_mean_abs(rng):
    shift = rng.choice([-1.0, 1.0], size=(4, 5)) * rng.uniform(1.0, 2.0, size=(4, 5))
    x0 = rng.uniform(-0.4, 0.4, size=(4, 5))

    def fn(x):
        return nm.scale((x + nm.constant(shift)).abs().mean(), 1.7)

    return fn, x0


def _build_sigmoid(rng):
    v = rng.normal(size=(6,))
    x0 = rng.normal(size=(6,)) * 3.0

    def fn(x):
        return (nm.sigmoid(x) * nm.constant(v)).sum()

    return fn, x0


def _build_tanh(rng):
    v = rng.normal(size=(6,))
    x0 = rng.normal(size=(6,)) * 2.0

    def fn(x):
        return (nm.tanh(x) * nm.constant(v)).sum()

    return fn, x0


def _build_cumsum(rng):
    v = rng.normal(size=(4, 3))
    x0 = rng.normal(size=(4, 3))

    def fn(x):
        return (nm.cumsum(x, axis=0) * nm.constant(v)).sum()

    return fn, x0


def _build_soft_round(rng):
    v = rng.normal(size=(8,))
    x0 = _away_from_half_integers(rng, (8,))

    def fn(x):
        return (nm.soft_round(x) * nm.constant(v)).sum()

    return fn, x0


def _build_matmul_left(rng):
    c = rng.normal(size=(4, 5))
    cvec = rng.normal(size=(4,))
    v = rng.normal(size=(3, 5))
    v2 = rng.normal(size=(3,))
    x0 = rng.normal(size=(3, 4))

    def fn(a):
        mm = (nm.matmul(a, nm.constant(c)) * nm.constant(v)).sum()
        mv = nm.dot(nm.matmul(a, nm.constant(cvec)), nm.constant(v2))
        return mm + mv

    return fn, x0


def _build_matmul_right(rng):
    c = rng.normal(size=(3, 4))
    cvec = rng.normal(size=(4,))
    v = rng.normal(size=(3, 5))
    v2 = rng.normal(size=(5,))
    x0 = rng.normal(size=(4, 5))

    def fn(b):
        mm = (nm.matmul(nm.constant(c), b) * nm.constant(v)).sum()
        vm = nm.dot(nm.matmul(nm.constant(cvec), b), nm.constant(v2))
        return mm + vm

    return fn, x0


def _build_dot_sqnorm(rng):
    c = rng.normal(size=(7,))
    x0 = rng.normal(size=(7,))

    def fn(x):
        return nm.dot(x, nm.constant(c)) + nm.scale(nm.sqnorm(x - nm.constant(c)), 0.3)

    return fn, x0


def _build_cosine(rng):
    b = rng.normal(size=(9,)) + np.sign(rng.normal(size=(9,))) * 0.5
    x0 = rng.normal(size=(9,)) + np.sign(rng.normal(size=(9,))) * 0.5

    def fn(x):
        return nm.cosine_similarity(x, nm.constant(b))

    return fn, x0


def _build_conv_same(rng):
    ker = rng.normal(size=(3, 3))
    v = rng.normal(size=(6, 6, 2))
    x0 = rng.normal(size=(6, 6, 2))

    def fn(x):
        return (nm.conv2d(x, nm.constant(ker), padding="same") * nm.constant(v)).sum()

    return fn, x0


def _build_conv_kernel(rng):
    img = rng.normal(size=(6, 6))
    v = rng.normal(size=(4, 4))
    x0 = rng.normal(size=(3, 3))

    def fn(k):
        return (nm.conv2d(nm.constant(img), k, padding="valid") * nm.constant(v)).sum()

    return fn, x0


def _build_dct8(rng):
    v1 = rng.normal(size=(8, 16))
    v2 = rng.normal(size=(8, 16))
    x0 = rng.normal(size=(8, 16))

    def fn(x):
        fwd = nm.dct8_blocks(x)
        back = nm.dct8_blocks(x, inverse=True)
        return (fwd * nm.constant(v1)).sum() + (back * nm.constant(v2)).sum()

    return fn, x0


def _build_resample(rng):
    v = rng.normal(size=(8, 8, 3))
    x0 = rng.normal(size=(8, 8, 3))

    def fn(x):
        up = nm.upsample_nearest(x, 2)
        down = nm.downsample_area(up, 4)
        return (nm.upsample_nearest(down, 2) * nm.constant(v)).sum()

    return fn, x0


def _build_resize(rng):
    v_up = rng.normal(size=(11, 9, 3))
    v_down = rng.normal(size=(3, 4, 3))
    x0 = rng.normal(size=(7, 6, 3))

    def fn(x):
        up = nm.resize_bilinear(x, (11, 9))
        down = nm.resize_bilinear(x, (3, 4))
        return (up * nm.constant(v_up)).sum() + (down * nm.constant(v_down)).sum()

    return fn, x0


def _build_channel_stack(rng):
    v = rng.normal(size=(4, 4, 3))
    x0 = rng.normal(size=(4, 4, 3))

    def fn(x):
        r = nm.channel(x, 0)
        g = nm.channel(x, 1)
        b = nm.channel(x, 2)
        remix = nm.stack_channels([g, b, r])
        return (remix * nm.constant(v)).sum() + nm.scale((r * g).sum(), 0.25)

    return fn, x0


def _build_reshape_flatten(rng):
    v = rng.normal(size=(12,))
    x0 = rng.normal(size=(3, 4))

    def fn(x):
        return nm.dot(x.flatten(), nm.constant(v)) + nm.scale(
            nm.sqnorm(x.reshape((2, 6))), 0.1
        )

    return fn, x0


_SMALL_GEN = None


def _small_generator():
    global _SMALL_GEN
    if _SMALL_GEN is None:
        _SMALL_GEN = synthetic_spec(
            seed=11, latent_shape=(4, 16), output_shape=(32, 32, 3)
        )
    return _SMALL_GEN


def _build_generate(rng):
    spec = _small_generator()
    v = rng.normal(size=spec.output_shape)
    x0 = rng.normal(size=spec.latent_shape)

    def fn(w):
        return (generate(spec, w) * nm.constant(v)).sum()

    return fn, x0


def _build_degrade(rng):
    spec = DegradationSpec(kernel=gaussian_kernel(3, 0.8), scale=2)
    v = rng.normal(size=(6, 6, 3))
    x0 = rng.uniform(0.05, 0.95, size=(12, 12, 3))

    def fn(x):
        return (degrade(x, spec) * nm.constant(v)).sum()

    return fn, x0


def _build_soft_jpeg(rng):
    v = rng.normal(size=(8, 8, 3))
    x0 = rng.uniform(0.05, 0.95, size=(8, 8, 3))

    def fn(x):
        return (soft_jpeg(x, 50) * nm.constant(v)).sum()

    return fn, x0


def _build_degrade_jpeg(rng):
    spec = DegradationSpec(scale=1, jpeg_quality=75)
    v = rng.normal(size=(8, 8, 3))
    x0 = rng.uniform(0.05, 0.95, size=(8, 8, 3))

    def fn(x):
        return (degrade(x, spec) * nm.constant(v)).sum()

    return fn, x0


_EMB_SPEC = EmbedderSpec(resolution=8, dim=12, seed=5)


def _build_embed(rng):
    ref = rng.normal(size=(12,))
    ref /= np.linalg.norm(ref)
    x0 = rng.uniform(0.1, 0.9, size=(8, 8, 3))

    def fn(x):
        return embedding_similarity(_EMB_SPEC, x, ref)

    return fn, x0


def _build_identity_loss(rng):
    spec = _small_generator()
    guide = LatentCode(rng.normal(size=spec.latent_shape))
    guide_emb = embed(_EMB_SPEC, generate(spec, guide).data)
    x0 = rng.normal(size=spec.latent_shape)

    def fn(w):
        return identity_loss(w, guide, guide_emb, spec, _EMB_SPEC, anchor_weight=0.001)

    return fn, x0


def _build_emotion_loss(rng):
    d = rng.normal(size=(64,))
    d /= np.linalg.norm(d)
    direction = SemanticDirection(name="probe", direction=d, bias=0.0, accuracy=1.0)
    x0 = rng.normal(size=(4, 16))

    def fn(w):
        return emotion_loss(w, direction, step=1.0)

    return fn, x0


def _build_hist_values(rng):
    w = rng.uniform(0.5, 1.5, size=(20,))
    v = rng.normal(size=(8,))
    x0 = _hist_safe_values(rng, 20, 8)

    def fn(x):
        return (soft_histogram(x, nm.constant(w), 8) * nm.constant(v)).sum()

    return fn, x0


def _build_hist_weights(rng):
    vals = _hist_safe_values(rng, 20, 8)
    v = rng.normal(size=(8,))
    x0 = rng.uniform(0.5, 1.5, size=(20,))

    def fn(w):
        return (soft_histogram(nm.constant(vals), w, 8) * nm.constant(v)).sum()

    return fn, x0


def _build_hist_loss(rng):
    other = _hist_safe_values(rng, 48, 8).reshape(4, 4, 3)
    mask_a = rng.uniform(0.3, 1.0, size=(4, 4))
    mask_b = rng.uniform(0.3, 1.0, size=(4, 4))
    x0 = _hist_safe_values(rng, 48, 8).reshape(4, 4, 3)

    def fn(x):
        return hist_loss(x, mask_a, nm.constant(other), mask_b, bins=8)

    return fn, x0


def _build_total_loss(rng):
    spec = _small_generator()
    emb_spec = _EMB_SPEC
    guide = LatentCode(rng.normal(size=spec.latent_shape))
    guide_emb = embed(emb_spec, generate(spec, guide).data)
    d = rng.normal(size=(64,))
    d /= np.linalg.norm(d)
    direction = SemanticDirection(name="probe", direction=d, bias=0.0, accuracy=1.0)
    assumed = DegradationSpec(kernel=gaussian_kernel(3, 0.8), scale=4)
    truth = rng.normal(size=spec.latent_shape)
    observation = degrade(generate(spec, nm.constant(truth)), assumed).data
    config = RestoreConfig(
        assumed=assumed,
        enable_id=True,
        enable_emotion=True,
        enable_hist=True,
        emotion_target="probe",
    )
    provider = FullMask()
    ctx = RestoreContext(
        observation=nm.constant(observation),
        config=config,
        gen_spec=spec,
        emb_spec=emb_spec,
        guide=guide,
        guide_embedding=guide_emb,
        direction=direction,
        mask_provider=provider,
        observation_mask=provider.mask_for(observation),
    )
    x0 = rng.normal(size=spec.latent_shape)

    def fn(w):
        return total_loss(w, ctx)[0]

    return fn, x0


_CHECKS = [
    ("arithmetic", "numerics", _build_arith, OP_TOLERANCE),
    ("scale_mean_abs", "numerics", _build_scale_mean_abs, OP_TOLERANCE),
    ("sigmoid", "numerics", _build_sigmoid, OP_TOLERANCE),
    ("tanh", "numerics", _build_tanh, OP_TOLERANCE),
    ("cumsum", "numerics", _build_cumsum, OP_TOLERANCE),
    ("soft_round", "numerics", _build_soft_round, OP_TOLERANCE),
    ("dot_sqnorm", "numerics", _build_dot_sqnorm, OP_TOLERANCE),
    ("matmul_left", "numerics", _build_matmul_left, OP_TOLERANCE),
    ("matmul_right", "numerics", _build_matmul_right, OP_TOLERANCE),
    ("cosine_similarity", "numerics", _build_cosine, OP_TOLERANCE),
    ("conv2d_image", "numerics", _build_conv_same, OP_TOLERANCE),
    ("conv2d_kernel", "numerics", _build_conv_kernel, OP_TOLERANCE),
    ("dct8", "numerics", _build_dct8, OP_TOLERANCE),
    ("resample", "numerics", _build_resample, OP_TOLERANCE),
    ("resize_bilinear", "numerics", _build_resize, OP_TOLERANCE),
    ("channel_stack", "numerics", _build_channel_stack, OP_TOLERANCE),
    ("reshape_flatten", "numerics", _build_reshape_flatten, OP_TOLERANCE),
    ("generate", "generator", _build_generate, OP_TOLERANCE),
    ("degrade", "degradation", _build_degrade, OP_TOLERANCE),
    ("soft_jpeg", "degradation", _build_soft_jpeg, OP_TOLERANCE),
    ("degrade_jpeg", "degradation", _build_degrade_jpeg, OP_TOLERANCE),
    ("embed", "semantics", _build_embed, OP_TOLERANCE),
    ("identity_loss", "semantics", _build_identity_loss, OP_TOLERANCE),
    ("emotion_loss", "semantics", _build_emotion_loss, OP_TOLERANCE),
    ("soft_histogram_values", "semantics", _build_hist_values, OP_TOLERANCE),
    ("soft_histogram_weights", "semantics", _build_hist_weights, OP_TOLERANCE),
    ("hist_loss", "semantics", _build_hist_loss, OP_TOLERANCE),
    ("total_objective", "restore", _build_total_loss, OBJECTIVE_TOLERANCE),
]

MODULES = ("numerics", "generator", "degradation", "semantics", "restore")


def run_checks(
    module: str = "all",
    points: int = DEFAULT_POINTS,
    step: float = DEFAULT_STEP,
) -> list[CheckResult]:
    """Run the finite-difference suite; returns one result per check."""
    if module != "all" and module not in MODULES:
        raise ValueError(f"unknown gradcheck module {module!r}")
    results = []
    for index, (name, mod, build, tol) in enumerate(_CHECKS):
        if module != "all" and mod != module:
            continue
        worst = 0.0
        for point in range(points):
            rng = np.random.default_rng(np.random.SeedSequence([271, index, point]))
            worst = max(worst, _check_point(build, rng, step))
        results.append(
            CheckResult(
                name=name, module=mod, points=points, max_rel_err=worst, tolerance=tol
            )
        )
    return results
