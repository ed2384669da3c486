"""Spectrogram image preprocessing: palettes, highboost sharpening, SVD reduction."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import convolve

from .spectra import KIND_IMAGE, SCALE_NONE, Spectrogram, minmax_normalize, save_spg, load_spg

# Piecewise-linear palette anchors: position in [0,1] -> RGB in [0,1].
PALETTES: dict[str, list[tuple[float, tuple[float, float, float]]]] = {
    "BBG": [(0.0, (0.0, 0.0, 0.0)), (0.5, (0.0, 0.0, 1.0)), (1.0, (0.0, 1.0, 0.0))],
    "PG": [(0.0, (0.5, 0.0, 0.5)), (1.0, (1.0, 0.84, 0.0))],
    "WB": [(0.0, (1.0, 1.0, 1.0)), (1.0, (0.0, 0.0, 0.0))],
}

# 5x5 Laplacian: positive center, -1 elsewhere, normalized so a unit impulse
# responds with 1 and any constant region responds with 0.
HIGHBOOST_KERNEL = np.full((5, 5), -1.0 / 24.0)
HIGHBOOST_KERNEL[2, 2] = 1.0

_CHANNEL_TAGS = ("r", "g", "b")


@dataclass
class ColorSpectrogram:
    """Three same-shape channel matrices in [0,1] plus the palette that made them."""

    channels: np.ndarray  # (3, rows, cols)
    palette: str
    scale_c: float = 1.0

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 3 or self.channels.shape[0] != 3:
            raise ValueError("channels must be a (3, rows, cols) array")
        if self.channels.min() < -1e-9 or self.channels.max() > 1.0 + 1e-9:
            raise ValueError("channel entries must lie in [0, 1]")
        self.channels = np.clip(self.channels, 0.0, 1.0)

    @property
    def shape(self):
        return self.channels.shape[1:]


@dataclass
class SvdReduction:
    """Full SVD of a matrix plus the number of leading components kept."""

    singular_values: np.ndarray
    hangers: np.ndarray  # left singular vectors, one per column
    aligners: np.ndarray  # right singular vectors, one per column
    kept_rank: int

    def __post_init__(self):
        g = np.asarray(self.singular_values, dtype=np.float64)
        if np.any(np.diff(g) > 1e-12) or np.any(g < -1e-12):
            raise ValueError("singular values must be non-increasing and non-negative")
        if not 1 <= self.kept_rank <= g.size:
            raise ValueError("kept_rank must lie in [1, n_singular_values]")
        for m in (self.hangers, self.aligners):
            gram = m.T @ m
            if not np.allclose(gram, np.eye(gram.shape[0]), atol=1e-6):
                raise ValueError("singular vector columns must be orthonormal")


def palette_map(palette: str, t: np.ndarray) -> np.ndarray:
    """Map positions t in [0,1] through the palette anchors; returns (3, ...)."""
    anchors = PALETTES[palette]
    pos = np.array([a[0] for a in anchors])
    rgb = np.array([a[1] for a in anchors])  # (n_anchors, 3)
    flat = np.clip(np.asarray(t, dtype=np.float64).ravel(), 0.0, 1.0)
    out = np.stack([np.interp(flat, pos, rgb[:, ch]) for ch in range(3)])
    return out.reshape((3,) + np.shape(t))


def color_compensate(sp: Spectrogram, palette: str, c: float) -> ColorSpectrogram:
    """Min-max normalize, scale intensities by c, then colorize via the palette."""
    if palette not in PALETTES:
        raise ValueError(f"unknown palette {palette!r}; choose from {sorted(PALETTES)}")
    if not 0.0 < c <= 1.0:
        raise ValueError("compensation scale c must lie in (0, 1]")
    t = minmax_normalize(sp.data)  # constant input maps to all zeros
    return ColorSpectrogram(palette_map(palette, c * t), palette, scale_c=c)


def highboost(img: ColorSpectrogram, c: float) -> ColorSpectrogram:
    """Add c times the Laplacian response per channel; replicate-padded, clipped."""
    if c < 0:
        raise ValueError("highboost amount c must be >= 0")
    out = np.empty_like(img.channels)
    for i in range(3):
        lap = convolve(img.channels[i], HIGHBOOST_KERNEL, mode="nearest")
        out[i] = np.clip(img.channels[i] + c * lap, 0.0, 1.0)
    return ColorSpectrogram(out, img.palette, scale_c=img.scale_c)


def luminance(img: ColorSpectrogram) -> np.ndarray:
    r, g, b = img.channels
    return 0.299 * r + 0.587 * g + 0.114 * b


def svd_reduce(mat: np.ndarray, n_prime: float) -> SvdReduction:
    """Full SVD with rank cut ceil(min(rows,cols)/n_prime).

    Singular values smaller than max(G)/255 (8-bit pixel precision) are
    pruned further when that lowers the rank.
    """
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.size == 0:
        raise ValueError("need a non-empty 2-D matrix")
    if not np.all(np.isfinite(mat)):
        raise ValueError("matrix contains non-finite entries")
    if n_prime <= 1.0:
        raise ValueError("n_prime must exceed 1")
    try:
        u, g, vt = np.linalg.svd(mat, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"SVD failed to converge: {exc}") from exc
    kept = int(np.ceil(g.size / n_prime))
    visible = int(np.sum(g >= g[0] / 255.0)) if g[0] > 0 else kept
    kept = max(1, min(kept, visible))
    return SvdReduction(g, u, vt.T, kept)


def svd_reconstruct(r: SvdReduction) -> np.ndarray:
    k = r.kept_rank
    return (r.hangers[:, :k] * r.singular_values[:k]) @ r.aligners[:, :k].T


def svd_smooth(mat: np.ndarray, n_prime: float) -> np.ndarray:
    """Reduce-then-reconstruct in one step (the low-rank smoothing used inline)."""
    return svd_reconstruct(svd_reduce(mat, n_prime))


def smooth_color(img: ColorSpectrogram, n_prime: float) -> ColorSpectrogram:
    """Per-channel SVD smoothing of a color spectrogram, clipped back to [0,1]."""
    out = np.stack([np.clip(svd_smooth(ch, n_prime), 0.0, 1.0) for ch in img.channels])
    return ColorSpectrogram(out, img.palette, scale_c=img.scale_c)


def save_png(img: ColorSpectrogram, path: str | Path) -> None:
    arr = np.clip(np.rint(img.channels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(str(path))


def save_color_channels(img: ColorSpectrogram, base: str | Path) -> list[Path]:
    """Lossless transport: one SPG1 file per channel, suffixed _r/_g/_b."""
    paths = []
    for tag, ch in zip(_CHANNEL_TAGS, img.channels):
        sp = Spectrogram(ch, KIND_IMAGE, SCALE_NONE, params={"palette": img.palette, "channel": tag})
        p = Path(f"{base}_{tag}.spg")
        save_spg(sp, p)
        paths.append(p)
    return paths


def load_color_channels(base: str | Path, palette: str = "", scale_c: float = 1.0) -> ColorSpectrogram:
    chans = []
    for tag in _CHANNEL_TAGS:
        sp = load_spg(Path(f"{base}_{tag}.spg"))
        chans.append(sp.data)
        palette = palette or sp.params.get("palette", "")
    return ColorSpectrogram(np.stack(chans), palette or "BBG", scale_c=scale_c)
