"""Latent-space restoration: fit a latent whose degraded decoding matches
the observation, regularized by identity, attribute, and histogram priors.

The loop is plain Adam over the latent.  Per-iteration losses are
recorded as the weighted contributions of each enabled term, so the
per-term trace always sums to the recorded total, and the returned
iterate is the one with the best recorded total.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .degradation import DegradationSpec, degrade
from .generator import GeneratorSpec, InversionResult, LatentCode, generate, invert
from .numerics import Array, GradientTape, NonFiniteError
from .optim import AdamState, adam_step
from .semantics import (
    EmbedderSpec,
    Embedding,
    FullMask,
    MaskProvider,
    SemanticDirection,
    embed,
    embedding_similarity,
    hist_loss,
)

__all__ = [
    "RestoreConfig",
    "RestoreContext",
    "RestorationResult",
    "AdamState",
    "adam_step",
    "select_reference",
    "total_loss",
    "restore",
]

_TERMS = ("fidelity", "identity", "emotion", "hist")


@dataclass
class RestoreConfig:
    """Weights, switches, optimizer settings, and the assumed degradation.

    ``anchor_weight`` scales the latent anchor inside the identity term;
    ``emotion_weight`` and ``hist_weight`` scale their losses in the
    total; ``emotion_step`` is the step size applied along the attribute
    direction inside the emotion loss.  Disabled terms contribute an
    exact 0.0, which is bitwise-equivalent to running them with zero
    weight.
    """

    assumed: DegradationSpec = field(default_factory=DegradationSpec)
    anchor_weight: float = 0.001
    emotion_weight: float = 0.1
    hist_weight: float = 0.05
    emotion_step: float = 1.0
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 400
    enable_id: bool = True
    enable_emotion: bool = False
    enable_hist: bool = True
    emotion_target: str | None = None
    hist_bins: int = 16
    fidelity_mode: str = "mean"
    inversion_iterations: int = 300
    inversion_lr: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.fidelity_mode not in ("mean", "sum"):
            raise ValueError(f"fidelity_mode must be 'mean' or 'sum', got {self.fidelity_mode!r}")
        if self.iterations < 0 or self.inversion_iterations < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.hist_bins < 2:
            raise ValueError(f"hist_bins must be >= 2, got {self.hist_bins}")

    def to_json_dict(self) -> dict:
        return {
            "assumed": self.assumed.to_json_dict(),
            "anchor_weight": self.anchor_weight,
            "emotion_weight": self.emotion_weight,
            "hist_weight": self.hist_weight,
            "emotion_step": self.emotion_step,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "iterations": self.iterations,
            "enable_id": self.enable_id,
            "enable_emotion": self.enable_emotion,
            "enable_hist": self.enable_hist,
            "emotion_target": self.emotion_target,
            "hist_bins": self.hist_bins,
            "fidelity_mode": self.fidelity_mode,
            "inversion_iterations": self.inversion_iterations,
            "inversion_lr": self.inversion_lr,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "RestoreConfig":
        kwargs = dict(obj)
        assumed = kwargs.pop("assumed", None)
        cfg = cls(**kwargs) if assumed is None else cls(
            assumed=DegradationSpec.from_json_dict(assumed), **kwargs
        )
        return cfg


@dataclass
class RestoreContext:
    """Everything the objective needs besides the current latent."""

    observation: Array
    config: RestoreConfig
    gen_spec: GeneratorSpec
    emb_spec: EmbedderSpec
    guide: LatentCode
    guide_embedding: Embedding | None
    direction: SemanticDirection | None
    mask_provider: MaskProvider
    observation_mask: np.ndarray


@dataclass
class RestorationResult:
    image: np.ndarray
    latent: LatentCode
    guide: LatentCode
    reference_index: int | None
    inversion: InversionResult
    trace: dict[str, list[float]]
    wall_seconds: float

    def trace_json_dict(self) -> dict:
        return {
            "trace": {k: list(v) for k, v in self.trace.items()},
            "latent": self.latent.to_json_dict(),
            "guide": self.guide.to_json_dict(),
            "reference_index": self.reference_index,
            "inversion_loss": self.inversion.loss,
        }


def select_reference(pool: list[np.ndarray], observation: np.ndarray, emb_spec: EmbedderSpec):
    """Pick the pool image whose embedding is most similar to the observation's.

    The embedder resizes inputs itself, so the observation's lower
    resolution needs no special handling.  Exact ties resolve to the
    lowest index.
    """
    if not pool:
        raise ValueError("reference pool is empty")
    obs = np.asarray(observation, dtype=np.float64)
    target_emb = embed(emb_spec, obs)
    scores = []
    for cand in pool:
        e = embed(emb_spec, np.asarray(cand, dtype=np.float64))
        scores.append(float(e.vector @ target_emb.vector))
    index = int(np.argmax(scores))
    return index, np.asarray(pool[index], dtype=np.float64)


def total_loss(w, ctx: RestoreContext) -> tuple[Array, dict[str, float]]:
    """Composite objective and its per-term weighted breakdown.

    The breakdown holds each term's contribution to the total (already
    weighted); disabled terms are exactly 0.0.
    """
    cfg = ctx.config
    w_arr = w if isinstance(w, Array) else nm.constant(w.matrix if isinstance(w, LatentCode) else w)
    image = generate(ctx.gen_spec, w_arr)
    degraded = degrade(image, cfg.assumed)

    resid = nm.sqnorm(degraded - ctx.observation)
    fidelity = nm.scale(resid, 1.0 / ctx.observation.size) if cfg.fidelity_mode == "mean" else resid
    total = fidelity
    breakdown = {"fidelity": fidelity.item(), "identity": 0.0, "emotion": 0.0, "hist": 0.0}

    if cfg.enable_id:
        cos = embedding_similarity(ctx.emb_spec, image, ctx.guide_embedding)
        anchor = nm.sqnorm(w_arr - nm.constant(ctx.guide.matrix))
        id_term = (1.0 - cos) + nm.scale(anchor, cfg.anchor_weight)
        breakdown["identity"] = id_term.item()
        total = total + id_term

    if cfg.enable_emotion:
        d = ctx.direction.direction
        shifted = w_arr.flatten() + nm.constant(cfg.emotion_step * d)
        emo = 1.0 - nm.cosine_similarity(shifted, nm.constant(d))
        emo_term = nm.scale(emo, cfg.emotion_weight)
        breakdown["emotion"] = emo_term.item()
        total = total + emo_term

    if cfg.enable_hist:
        gen_mask = ctx.mask_provider.mask_for(image.data)
        h = hist_loss(image, gen_mask, ctx.observation, ctx.observation_mask, bins=cfg.hist_bins)
        hist_term = nm.scale(h, cfg.hist_weight)
        breakdown["hist"] = hist_term.item()
        total = total + hist_term

    breakdown["total"] = total.item()
    return total, breakdown


def restore(
    observation: np.ndarray,
    pool: list[np.ndarray],
    config: RestoreConfig,
    gen_spec: GeneratorSpec,
    emb_spec: EmbedderSpec,
    directions: dict[str, SemanticDirection] | None = None,
    mask_provider: MaskProvider | None = None,
    reference: np.ndarray | None = None,
) -> RestorationResult:
    """Full pipeline: select reference, invert it, optimize the latent.

    ``reference`` bypasses pool selection when provided.  With
    ``iterations=0`` the result decodes the inverted reference latent and
    the trace is empty.  Identical inputs and seeds reproduce the result
    bitwise; ``wall_seconds`` is the only field excluded from that.
    """
    t_start = time.perf_counter()
    obs = np.asarray(observation, dtype=np.float64)
    if obs.ndim != 3 or obs.shape[2] != 3:
        raise ValueError(f"observation must be (H, W, 3), got shape {obs.shape}")
    cfg = config
    direction = None
    if cfg.enable_emotion:
        if not cfg.emotion_target:
            raise ValueError("enable_emotion requires emotion_target")
        if not directions or cfg.emotion_target not in directions:
            raise ValueError(f"no direction named {cfg.emotion_target!r} provided")
        direction = directions[cfg.emotion_target]
        if direction.direction.size != gen_spec.latent_size:
            raise ValueError("direction length does not match latent size")

    if reference is not None:
        ref_index, ref_image = None, np.asarray(reference, dtype=np.float64)
    else:
        ref_index, ref_image = select_reference(pool, obs, emb_spec)
    if ref_image.shape != gen_spec.output_shape:
        raise ValueError(
            f"reference shape {ref_image.shape} != generator output {gen_spec.output_shape}"
        )

    inversion = invert(
        gen_spec,
        ref_image,
        iterations=cfg.inversion_iterations,
        lr=cfg.inversion_lr,
        seed=cfg.seed,
    )
    guide = inversion.latent
    guide_embedding = embed(emb_spec, ref_image) if cfg.enable_id else None

    provider = mask_provider if mask_provider is not None else FullMask()
    ctx = RestoreContext(
        observation=nm.constant(obs),
        config=cfg,
        gen_spec=gen_spec,
        emb_spec=emb_spec,
        guide=guide,
        guide_embedding=guide_embedding,
        direction=direction,
        mask_provider=provider,
        observation_mask=provider.mask_for(obs) if cfg.enable_hist else np.ones(obs.shape[:2]),
    )

    trace: dict[str, list[float]] = {k: [] for k in _TERMS + ("total",)}
    state = AdamState.init(guide.matrix)
    best_total = np.inf
    best_w = guide.matrix.copy()
    for t in range(1, cfg.iterations + 1):
        leaf = nm.array(state.params, requires_grad=True)
        with GradientTape() as tape:
            loss, breakdown = total_loss(leaf, ctx)
        value = breakdown["total"]
        if not np.isfinite(value):
            raise NonFiniteError(f"restore: non-finite loss at iteration {t}")
        for k in trace:
            trace[k].append(breakdown[k])
        if value < best_total:
            best_total = value
            best_w = state.params.copy()
        tape.backward(loss)
        state = adam_step(
            state, leaf.grad, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, t=t
        )

    latent = LatentCode(best_w)
    image = generate(gen_spec, latent).data
    return RestorationResult(
        image=image,
        latent=latent,
        guide=guide,
        reference_index=ref_index,
        inversion=inversion,
        trace=trace,
        wall_seconds=time.perf_counter() - t_start,
    )
