"""Deterministic physical-signature mining from raster images.

A signature concatenates three normalized histograms computed from pixel
statistics alone, with no learned parameters:

* color: per-channel intensity histograms (R then G then B), bin
  ``floor(value * bins / 256)``, each channel normalized by the pixel count;
* structure: a histogram of Sobel gradient orientations folded into
  [0, pi), restricted to pixels whose gradient magnitude exceeds a relative
  threshold of the image maximum;
* texture: a histogram of log-compressed absolute Laplacian responses,
  rescaled by the per-image maximum into [0, 1].

All stencils use circular (toroidal) padding, so every signature is exactly
equivariant under cyclic image shifts: shifting the input permutes pixel
positions but leaves every histogram bitwise unchanged. Signatures are used
as supervision targets, never as model inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError

__all__ = [
    "SignatureConfig",
    "Image",
    "GradientField",
    "TextureField",
    "PhysicalSignature",
    "SOBEL_X",
    "SOBEL_Y",
    "LAPLACIAN_4",
    "LUMA_WEIGHTS",
    "to_grayscale",
    "conv3x3_circular",
    "color_signature",
    "structure_signature",
    "texture_signature",
    "mine_signature",
]

# Sobel pair; rows index the vertical offset, columns the horizontal one.
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()
# 4-neighbor Laplacian stencil.
LAPLACIAN_4 = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
# BT.601 luma coefficients for R, G, B.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class SignatureConfig:
    """Histogram bin counts and the relative gradient threshold."""

    color_bins: int = 16
    orient_bins: int = 18
    texture_bins: int = 16
    tau_rel: float = 0.15

    def __post_init__(self):
        for label, n in (
            ("color_bins", self.color_bins),
            ("orient_bins", self.orient_bins),
            ("texture_bins", self.texture_bins),
        ):
            if int(n) != n or n < 2:
                raise ValidationError(f"{label} must be an integer >= 2, got {n!r}")
        if not (0.0 < self.tau_rel < 1.0):
            raise ValidationError(f"tau_rel must lie in (0, 1), got {self.tau_rel!r}")

    @property
    def color_dim(self) -> int:
        return 3 * self.color_bins

    @property
    def total_dim(self) -> int:
        return self.color_dim + self.orient_bins + self.texture_bins

    def to_dict(self) -> dict:
        return {
            "color_bins": self.color_bins,
            "orient_bins": self.orient_bins,
            "texture_bins": self.texture_bins,
            "tau_rel": self.tau_rel,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SignatureConfig":
        return cls(
            color_bins=int(d["color_bins"]),
            orient_bins=int(d["orient_bins"]),
            texture_bins=int(d["texture_bins"]),
            tau_rel=float(d["tau_rel"]),
        )


@dataclass(frozen=True)
class Image:
    """8-bit RGB raster, shape (height, width, 3), channel order R, G, B."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if not isinstance(p, np.ndarray) or p.dtype != np.uint8:
            raise ValidationError("Image.pixels must be a uint8 ndarray")
        if p.ndim != 3 or p.shape[2] != 3:
            raise ValidationError(f"Image.pixels must have shape (H, W, 3), got {p.shape}")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ValidationError("Image must have at least one pixel")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class GradientField:
    """Per-pixel Sobel magnitude, folded orientation in [0, pi), and mask."""

    magnitude: np.ndarray
    orientation: np.ndarray
    mask: np.ndarray


@dataclass(frozen=True)
class TextureField:
    """Per-pixel absolute Laplacian energy and its log(1 + E) compression."""

    energy: np.ndarray
    log_energy: np.ndarray


@dataclass(frozen=True)
class PhysicalSignature:
    f_color: np.ndarray
    f_struc: np.ndarray
    f_tex: np.ndarray

    @property
    def p_sig(self) -> np.ndarray:
        return np.concatenate([self.f_color, self.f_struc, self.f_tex])


def to_grayscale(img: Image) -> np.ndarray:
    """BT.601 luma as float64, same height/width as the input."""
    p = img.pixels.astype(np.float64)
    wr, wg, wb = LUMA_WEIGHTS
    return wr * p[:, :, 0] + wg * p[:, :, 1] + wb * p[:, :, 2]


def conv3x3_circular(field: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Correlate a 2-D field with a 3x3 stencil under toroidal wrap-around.

    output[y, x] = sum over (dy, dx) of kernel[dy+1, dx+1] *
    field[(y+dy) mod H, (x+dx) mod W]. Implemented with np.roll so shifted
    inputs produce bitwise-shifted outputs.
    """
    field = np.asarray(field, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if field.ndim != 2:
        raise DimensionError(f"conv3x3_circular needs a 2-D field, got {field.shape}")
    if kernel.shape != (3, 3):
        raise DimensionError(f"kernel must be 3x3, got {kernel.shape}")
    if field.shape[0] < 3 or field.shape[1] < 3:
        raise DimensionError(f"field must be at least 3x3, got {field.shape}")
    out = np.zeros_like(field)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            w = kernel[dy + 1, dx + 1]
            if w != 0.0:
                out += w * np.roll(field, (-dy, -dx), axis=(0, 1))
    return out


def color_signature(img: Image, color_bins: int = 16) -> np.ndarray:
    """Concatenated per-channel histograms, each normalized by H*W."""
    if int(color_bins) != color_bins or color_bins < 2:
        raise ValidationError(f"color_bins must be an integer >= 2, got {color_bins!r}")
    n = img.height * img.width
    parts = []
    for c in range(3):
        # floor(v * B / 256) never reaches B because v <= 255
        bins = (img.pixels[:, :, c].astype(np.int64) * color_bins) // 256
        hist = np.bincount(bins.ravel(), minlength=color_bins).astype(np.float64)
        parts.append(hist / n)
    return np.concatenate(parts)


def structure_signature(
    img: Image, cfg: SignatureConfig = SignatureConfig()
) -> tuple[np.ndarray, GradientField]:
    """Orientation histogram of salient gradients, plus the raw field.

    Orientations are atan2(gy, gx) folded mod pi. The salience mask keeps
    pixels with magnitude strictly above tau_rel times the image maximum; on
    a constant image the mask is empty and the histogram falls back to
    uniform mass so downstream cosine similarities stay defined.
    """
    luma = to_grayscale(img)
    gx = conv3x3_circular(luma, SOBEL_X)
    gy = conv3x3_circular(luma, SOBEL_Y)
    mag = np.sqrt(gx * gx + gy * gy)
    orient = np.mod(np.arctan2(gy, gx), np.pi)
    mask = mag > cfg.tau_rel * mag.max()
    field = GradientField(magnitude=mag, orientation=orient, mask=mask)

    b = cfg.orient_bins
    count = int(mask.sum())
    if count == 0:
        return np.full(b, 1.0 / b), field
    bins = np.clip((orient[mask] * b / np.pi).astype(np.int64), 0, b - 1)
    hist = np.bincount(bins, minlength=b).astype(np.float64)
    return hist / count, field


def texture_signature(
    img: Image, cfg: SignatureConfig = SignatureConfig()
) -> tuple[np.ndarray, TextureField]:
    """Histogram of log-compressed Laplacian energy scaled to [0, 1].

    The per-image maximum of log(1 + E) sets the scale; a perfectly flat
    image (zero energy everywhere) puts all mass in bin 0.
    """
    luma = to_grayscale(img)
    energy = np.abs(conv3x3_circular(luma, LAPLACIAN_4))
    log_energy = np.log1p(energy)
    field = TextureField(energy=energy, log_energy=log_energy)

    b = cfg.texture_bins
    n = img.height * img.width
    peak = log_energy.max()
    if peak == 0.0:
        hist = np.zeros(b)
        hist[0] = 1.0
        return hist, field
    v = log_energy / peak
    bins = np.clip((v * b).astype(np.int64), 0, b - 1)
    hist = np.bincount(bins.ravel(), minlength=b).astype(np.float64)
    return hist / n, field


def mine_signature(img: Image, cfg: SignatureConfig = SignatureConfig()) -> PhysicalSignature:
    """Full signature for one image; needs at least a 3x3 raster."""
    if img.height < 3 or img.width < 3:
        raise DimensionError(
            f"signature mining needs height and width >= 3, got {img.height}x{img.width}"
        )
    f_color = color_signature(img, cfg.color_bins)
    f_struc, _ = structure_signature(img, cfg)
    f_tex, _ = texture_signature(img, cfg)
    return PhysicalSignature(f_color=f_color, f_struc=f_struc, f_tex=f_tex)
