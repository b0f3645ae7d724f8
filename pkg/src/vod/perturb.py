"""Gaussian blur, Gaussian noise and JPEG compression at five severities."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.ndimage import convolve1d

from .errors import InvalidSeverity

KINDS = ("gaussian_blur", "gaussian_noise", "compression")
ALIASES = {"blur": "gaussian_blur", "noise": "gaussian_noise", "compress": "compression", "jpeg": "compression"}

# severities 1..5; index 0 is the identity
SEVERITY_TABLE = {
    "gaussian_blur": (0.5, 1.0, 2.0, 3.0, 4.0),  # sigma in pixels
    "gaussian_noise": (0.02, 0.04, 0.08, 0.12, 0.16),  # sigma as a fraction of the dynamic range
    "compression": (90, 70, 50, 30, 15),  # JPEG quality
}
MAX_SEVERITY = 5


def canonical_kind(kind: str) -> str:
    kind = ALIASES.get(kind, kind)
    if kind not in KINDS:
        raise ValueError(f"unknown perturbation {kind!r}; choose from {KINDS + tuple(ALIASES)}")
    return kind


@dataclass(frozen=True)
class PerturbSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", canonical_kind(self.kind))
        if not isinstance(self.severity, (int, np.integer)) or not 0 <= self.severity <= MAX_SEVERITY:
            raise InvalidSeverity(f"severity must be an integer in 0..{MAX_SEVERITY}, got {self.severity!r}")

    @property
    def parameter(self):
        return None if self.severity == 0 else SEVERITY_TABLE[self.kind][self.severity - 1]


def gaussian_kernel(sigma: float, truncate: float = 4.0) -> np.ndarray:
    radius = max(1, int(math.ceil(truncate * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(frame: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over rows and columns of a float ``(H, W[, C])`` image."""
    k = gaussian_kernel(sigma)
    out = convolve1d(frame, k, axis=0, mode="reflect")
    return convolve1d(out, k, axis=1, mode="reflect")


def gaussian_noise(frame: np.ndarray, sigma: float, rng: np.random.Generator, clip: bool = True) -> np.ndarray:
    out = frame + rng.normal(0.0, sigma, size=frame.shape)
    return np.clip(out, 0.0, 1.0) if clip else out


def jpeg_roundtrip(frame_u8: np.ndarray, quality: int) -> np.ndarray:
    buf = io.BytesIO()
    Image.fromarray(frame_u8).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im).copy()


def _to_u8(unit: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(unit * 255.0), 0, 255).astype(np.uint8)


def perturb(frame: np.ndarray, spec: PerturbSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply ``spec`` to one frame; uint8 frames stay uint8, float frames are taken in [0, 1]."""
    if spec.severity == 0:
        return frame.copy()
    p = spec.parameter
    is_u8 = frame.dtype == np.uint8
    if spec.kind == "compression":
        u8 = frame if is_u8 else _to_u8(frame)
        out = jpeg_roundtrip(u8, p)
        return out if is_u8 else (out.astype(np.float64) / 255.0).astype(frame.dtype)
    unit = frame.astype(np.float64) / 255.0 if is_u8 else frame.astype(np.float64)
    if spec.kind == "gaussian_blur":
        out = gaussian_blur(unit, p)
    else:
        out = gaussian_noise(unit, p, rng if rng is not None else np.random.default_rng(spec.seed))
    return _to_u8(out) if is_u8 else out.astype(frame.dtype)


def perturb_stack(frames: np.ndarray, spec: PerturbSpec, stream: int = 0) -> np.ndarray:
    """Perturb every frame of a ``(T, H, W, 3)`` stack; noise is independent per frame."""
    if spec.severity == 0:
        return frames.copy()
    rng = np.random.default_rng([spec.seed, stream])
    return np.stack([perturb(f, spec, rng) for f in frames])
