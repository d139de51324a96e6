"""Differentiable image degradation: blur, downsample, noise, soft JPEG.

The forward model is blur -> box downsample -> additive seeded Gaussian
noise -> JPEG with soft coefficient rounding.  Noise participates only
when a spec opts in (``noise_in_forward``): synthesis of observations
wants it, the restoration objective does not.  Everything except the
noise draw is differentiable with respect to the input image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Array

__all__ = [
    "DegradationSpec",
    "gaussian_kernel",
    "soft_jpeg",
    "degrade",
    "downsample_bicubic",
]

# Annex-K base quantization tables (luma, chroma)
_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)

_CHROMA_TABLE = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.float64,
)

# full-range BT.601 RGB <-> YCbCr, with the exact matrix inverse so the
# color round trip is lossless to machine precision
_RGB_TO_YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168735892, -0.331264108, 0.5],
        [0.5, -0.418687589, -0.081312411],
    ]
)
_YCC_TO_RGB = np.linalg.inv(_RGB_TO_YCC)
_YCC_OFFSET = np.array([0.0, 128.0, 128.0])


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized isotropic Gaussian blur kernel with odd side length."""
    size = int(size)
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    half = (size - 1) // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    xx, yy = np.meshgrid(coords, coords)
    kernel = np.exp(-(xx**2 + yy**2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


@dataclass
class DegradationSpec:
    """Parameters of the degradation operator.

    ``kernel`` is a normalized blur kernel or None for identity (the JSON
    form uses the string "identity").  ``jpeg_quality`` of None disables
    compression.  ``noise_in_forward`` controls whether the seeded noise
    draw participates when this spec is evaluated; restoration keeps it
    off so the objective stays deterministic and differentiable.
    """

    kernel: np.ndarray | None = None
    scale: int = 1
    noise_sigma: float = 0.0
    noise_seed: int = 0
    jpeg_quality: float | None = None
    noise_in_forward: bool = False

    def __post_init__(self):
        if self.kernel is not None:
            self.kernel = np.asarray(self.kernel, dtype=np.float64)
            if self.kernel.ndim != 2:
                raise ValueError(f"kernel must be 2-D, got shape {self.kernel.shape}")
            kh, kw = self.kernel.shape
            if kh % 2 == 0 or kw % 2 == 0:
                raise ValueError(f"kernel sides must be odd, got {self.kernel.shape}")
            if np.any(self.kernel < 0):
                raise ValueError("kernel entries must be nonnegative")
            total = float(self.kernel.sum())
            if abs(total - 1.0) > 1e-12:
                raise ValueError(f"kernel must sum to 1 within 1e-12, got {total}")
        self.scale = int(self.scale)
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        self.noise_sigma = float(self.noise_sigma)
        if self.noise_sigma < 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.noise_sigma}")
        self.noise_seed = int(self.noise_seed)
        if self.jpeg_quality is not None:
            self.jpeg_quality = float(self.jpeg_quality)
            if not 1.0 <= self.jpeg_quality <= 100.0:
                raise ValueError(f"jpeg quality must be in [1, 100], got {self.jpeg_quality}")

    def is_identity(self) -> bool:
        return (
            self.kernel is None
            and self.scale == 1
            and self.jpeg_quality is None
            and not (self.noise_in_forward and self.noise_sigma > 0)
        )

    def to_json_dict(self) -> dict:
        return {
            "kernel": "identity" if self.kernel is None else self.kernel.tolist(),
            "scale": self.scale,
            "noise_sigma": self.noise_sigma,
            "noise_seed": self.noise_seed,
            "jpeg_quality": self.jpeg_quality,
            "noise_in_forward": self.noise_in_forward,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "DegradationSpec":
        kernel = obj.get("kernel", "identity")
        if isinstance(kernel, str):
            if kernel != "identity":
                raise ValueError(f"unknown kernel spec {kernel!r}")
            kernel = None
        return cls(
            kernel=kernel,
            scale=int(obj.get("scale", 1)),
            noise_sigma=float(obj.get("noise_sigma", 0.0)),
            noise_seed=int(obj.get("noise_seed", 0)),
            jpeg_quality=obj.get("jpeg_quality"),
            noise_in_forward=bool(obj.get("noise_in_forward", False)),
        )


def _scaled_table(base: np.ndarray, quality: float) -> np.ndarray:
    if quality < 50.0:
        scale = 5000.0 / quality
    else:
        scale = 200.0 - 2.0 * quality
    return np.maximum(1.0, np.floor((base * scale + 50.0) / 100.0))


def _same_kind(result: Array, reference) -> Array | np.ndarray:
    return result if isinstance(reference, Array) else result.data


def soft_jpeg(image, quality: float) -> Array | np.ndarray:
    """JPEG round trip with soft rounding in place of quantization.

    Works in the 0..255 domain: BT.601 color transform, 8x8 orthonormal
    DCT per channel, division by the quality-scaled Annex-K tables, soft
    rounding, and the exact inverse path.  No chroma subsampling.  Output
    may overshoot [0, 1] slightly; clipping is left to image export.
    """
    quality = float(quality)
    if not 1.0 <= quality <= 100.0:
        raise ValueError(f"jpeg quality must be in [1, 100], got {quality}")
    img = image if isinstance(image, Array) else nm.constant(np.asarray(image, dtype=np.float64))
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"soft_jpeg: need an (H, W, 3) image, got shape {img.shape}")
    H, W, _ = img.shape
    if H % 8 != 0 or W % 8 != 0:
        raise ValueError(f"soft_jpeg: sides must be multiples of 8, got {(H, W)}")

    tables = (
        _scaled_table(_LUMA_TABLE, quality),
        _scaled_table(_CHROMA_TABLE, quality),
        _scaled_table(_CHROMA_TABLE, quality),
    )

    flat = img.reshape((H * W, 3))
    ycc = nm.matmul(flat * 255.0, nm.constant(_RGB_TO_YCC.T))
    recon_channels = []
    for c in range(3):
        plane = nm.channel(ycc.reshape((H, W, 3)), c) + (_YCC_OFFSET[c] - 128.0)
        coeff = nm.dct8_blocks(plane)
        table = nm.constant(np.tile(tables[c], (H // 8, W // 8)))
        inv_table = nm.constant(np.tile(1.0 / tables[c], (H // 8, W // 8)))
        quantized = nm.soft_round(coeff * inv_table) * table
        recon = nm.dct8_blocks(quantized, inverse=True) + (128.0 - _YCC_OFFSET[c])
        recon_channels.append(recon)
    ycc_rec = nm.stack_channels(recon_channels).reshape((H * W, 3))
    rgb = nm.matmul(ycc_rec, nm.constant(_YCC_TO_RGB.T)) * (1.0 / 255.0)
    return _same_kind(rgb.reshape((H, W, 3)), image)


def degrade(image, spec: DegradationSpec) -> Array | np.ndarray:
    """Apply blur, box downsampling, optional noise, then soft JPEG.

    An all-default spec is a bitwise identity.  The result type follows
    the input: Array in, Array out (differentiable); ndarray in, ndarray
    out.
    """
    was_array = isinstance(image, Array)
    img = image if was_array else nm.constant(np.asarray(image, dtype=np.float64))
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"degrade: need an (H, W, 3) image, got shape {img.shape}")
    if spec.is_identity():
        return image
    H, W, _ = img.shape
    out = img
    if spec.kernel is not None:
        out = nm.conv2d(out, nm.constant(spec.kernel), padding="same")
    if spec.scale > 1:
        if H % spec.scale != 0 or W % spec.scale != 0:
            raise ValueError(f"degrade: scale {spec.scale} does not divide image {(H, W)}")
        out = nm.downsample_area(out, spec.scale)
    if spec.noise_in_forward and spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.noise_seed)
        noise = rng.normal(0.0, spec.noise_sigma, size=out.shape)
        out = out + nm.constant(noise)
    if spec.jpeg_quality is not None:
        h, w, _ = out.shape
        if h % 8 != 0 or w % 8 != 0:
            raise ValueError(
                f"degrade: downsampled size {(h, w)} not divisible by 8, required for jpeg"
            )
        out = soft_jpeg(out, spec.jpeg_quality)
    return _same_kind(out, image)


def _bicubic_weight(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    w = np.zeros_like(t)
    near = t <= 1.0
    far = (t > 1.0) & (t < 2.0)
    w[near] = (a + 2.0) * t[near] ** 3 - (a + 3.0) * t[near] ** 2 + 1.0
    w[far] = a * t[far] ** 3 - 5.0 * a * t[far] ** 2 + 8.0 * a * t[far] - 4.0 * a
    return w


def _bicubic_matrix(n_out: int, n_in: int, factor: int) -> np.ndarray:
    # antialiased: the kernel support is stretched by the reduction factor
    mat = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * factor - 0.5
    for o in range(n_out):
        lo = int(np.floor(src[o] - 2 * factor)) + 1
        hi = int(np.ceil(src[o] + 2 * factor))
        taps = np.arange(lo, hi)
        w = _bicubic_weight((taps - src[o]) / factor)
        taps = np.clip(taps, 0, n_in - 1)
        total = w.sum()
        for tap, wt in zip(taps, w / total):
            mat[o, tap] += wt
    return mat


def downsample_bicubic(image: np.ndarray, factor: int) -> np.ndarray:
    """Antialiased Catmull-Rom downsample by an integer factor.

    Forward-only: used when synthesizing observations whose true
    degradation differs from the assumed one.
    """
    img = np.asarray(image, dtype=np.float64)
    s = int(factor)
    if s < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if s == 1:
        return img.copy()
    work = img[:, :, None] if img.ndim == 2 else img
    H, W, _ = work.shape
    if H % s != 0 or W % s != 0:
        raise ValueError(f"factor {s} does not divide image {(H, W)}")
    rows = _bicubic_matrix(H // s, H, s)
    cols = _bicubic_matrix(W // s, W, s)
    out = np.einsum("oh,hwc,pw->opc", rows, work, cols, optimize=True)
    return out[:, :, 0] if img.ndim == 2 else out
