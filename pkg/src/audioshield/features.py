"""Zoning, dense 64-D SURF descriptors, K-means++ codebook, distance encoding.

The grid is fixed at 8x8: square zones tile the image (truncated at borders)
and the grid slides inside each zone with the stride paired to that zone size.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GRID = 8
SURF_SIGMA = 3.3


@dataclass
class ZoningPlan:
    zone_sizes: list[int] = field(default_factory=lambda: [16, 32, 64, 96, 128])
    strides: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])

    def __post_init__(self):
        if len(self.zone_sizes) != len(self.strides):
            raise ValueError("zone_sizes and strides must pair up")
        if any(z < GRID for z in self.zone_sizes):
            raise ValueError(f"zone sizes must be >= {GRID}")
        if any(not 1 <= s <= 5 for s in self.strides):
            raise ValueError("strides must lie in [1, 5]")

    def fitted_to(self, shape: tuple[int, int]) -> "ZoningPlan":
        """Drop zone sizes larger than the image's smaller side."""
        limit = min(shape)
        pairs = [(z, s) for z, s in zip(self.zone_sizes, self.strides) if z <= limit]
        if not pairs:
            raise ValueError(f"no zone size fits an image of shape {shape}")
        return ZoningPlan([p[0] for p in pairs], [p[1] for p in pairs])


@dataclass
class SurfDescriptor:
    values: np.ndarray
    zone_origin: tuple[int, int] = (0, 0)
    grid_origin: tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (64,):
            raise ValueError("descriptor must have exactly 64 values")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("descriptor contains non-finite values")


@dataclass
class Codebook:
    centroids: np.ndarray
    inertia: float
    inertia_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.atleast_2d(np.asarray(self.centroids, dtype=np.float64))

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _grid_positions(extent: int, stride: int) -> np.ndarray:
    if extent < GRID:
        return np.empty(0, dtype=int)
    return np.arange(0, extent - GRID + 1, stride)


def count_patches(shape: tuple[int, int], plan: ZoningPlan) -> int:
    """Closed-form patch count: sum over zones of the grid positions squared
    (rectangular border zones contribute the product of their position counts)."""
    h, w = shape
    total = 0
    for z, s in zip(plan.zone_sizes, plan.strides):
        for r0 in range(0, h, z):
            for c0 in range(0, w, z):
                zh = min(z, h - r0)
                zw = min(z, w - c0)
                total += _grid_positions(zh, s).size * _grid_positions(zw, s).size
    return total


def zone_and_slide(img: np.ndarray, plan: ZoningPlan):
    """Collect every 8x8 patch the plan visits.

    Returns (patches, zone_origins, grid_origins) where patches is (P, 8, 8)
    and the origin arrays are (P, 2) in image coordinates.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if h < GRID or w < GRID:
        raise ValueError(f"image {img.shape} smaller than the {GRID}x{GRID} grid")
    zone_origins = []
    grid_origins = []
    for z, s in zip(plan.zone_sizes, plan.strides):
        for r0 in range(0, h, z):
            for c0 in range(0, w, z):
                rr = _grid_positions(min(z, h - r0), s)
                cc = _grid_positions(min(z, w - c0), s)
                if rr.size == 0 or cc.size == 0:
                    continue
                rows = (r0 + rr)[:, None].repeat(cc.size, axis=1).ravel()
                cols = (c0 + cc)[None, :].repeat(rr.size, axis=0).ravel()
                grid_origins.append(np.stack([rows, cols], axis=1))
                zone_origins.append(np.full((rows.size, 2), (r0, c0)))
    grid_origins = np.concatenate(grid_origins, axis=0)
    zone_origins = np.concatenate(zone_origins, axis=0)
    win = np.lib.stride_tricks.sliding_window_view(img, (GRID, GRID))
    patches = win[grid_origins[:, 0], grid_origins[:, 1]]
    return patches, zone_origins, grid_origins


def _surf_weights() -> np.ndarray:
    c = (GRID - 1) / 2.0
    rr, cc = np.mgrid[0:GRID, 0:GRID]
    return np.exp(-((rr - c) ** 2 + (cc - c) ** 2) / (2.0 * SURF_SIGMA**2))


_WEIGHTS = _surf_weights()
_CPLUS = np.minimum(np.arange(GRID) + 1, GRID - 1)
_CMINUS = np.maximum(np.arange(GRID) - 1, 0)


def surf64_batch(patches: np.ndarray) -> np.ndarray:
    """Upright SURF on 8x8 patches: per-pixel Haar responses (clamped central
    differences), Gaussian weighting, 4x4 subregions of 2x2 pixels each
    emitting (sum dx, sum dy, sum |dx|, sum |dy|); L2-normalized rows."""
    p = np.asarray(patches, dtype=np.float64)
    if p.ndim == 2:
        p = p[None]
    if p.shape[1:] != (GRID, GRID):
        raise ValueError(f"patches must be {GRID}x{GRID}")
    dx = (p[:, :, _CPLUS] - p[:, :, _CMINUS]) * _WEIGHTS
    dy = (p[:, _CPLUS, :] - p[:, _CMINUS, :]) * _WEIGHTS

    def sub(a):  # (N,8,8) -> (N,4,4) of 2x2-block sums
        return a.reshape(-1, 4, 2, 4, 2).sum(axis=(2, 4))

    stats = np.stack([sub(dx), sub(dy), sub(np.abs(dx)), sub(np.abs(dy))], axis=-1)
    desc = stats.reshape(-1, 64)
    norms = np.linalg.norm(desc, axis=1, keepdims=True)
    return np.where(norms > 0, desc / np.maximum(norms, 1e-300), desc)


def surf64(patch: np.ndarray, zone_origin=(0, 0), grid_origin=(0, 0)) -> SurfDescriptor:
    return SurfDescriptor(surf64_batch(patch)[0], tuple(zone_origin), tuple(grid_origin))


def extract_descriptors(img: np.ndarray, plan: ZoningPlan) -> np.ndarray:
    """All SURF descriptors of one grayscale image under the (fitted) plan."""
    patches, _, _ = zone_and_slide(img, plan.fitted_to(img.shape))
    return surf64_batch(patches)


# -- K-means++ codebook --------------------------------------------------------


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.sum(a**2, axis=1)[:, None] + np.sum(b**2, axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def _seed_plusplus(x: np.ndarray, k: int, rng) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = _sq_dists(x, centroids[:1]).ravel()
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = x[idx]
        d2 = np.minimum(d2, _sq_dists(x, centroids[j : j + 1]).ravel())
    return centroids


def kmeanspp_fit(
    vectors: np.ndarray,
    k: int,
    seed: int,
    tol: float = 1e-6,
    max_iter: int = 300,
) -> Codebook:
    """K-means++ seeding followed by Lloyd iterations.

    Stops when the largest centroid shift falls below `tol`; the recorded
    inertia sequence (one value per assignment) is non-increasing.
    """
    x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    n = x.shape[0]
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise ValueError(f"need at least k={k} vectors, got {n}")
    rng = np.random.default_rng(seed)
    centroids = _seed_plusplus(x, k, rng)
    history = []
    for _ in range(max_iter):
        d2 = _sq_dists(x, centroids)
        assign = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), assign].sum()))
        new = centroids.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                new[j] = x[members].mean(axis=0)
            else:
                # adopt the point farthest from its own centroid
                worst = int(np.argmax(d2[np.arange(n), assign]))
                new[j] = x[worst]
                assign[worst] = j
        shift = np.sqrt(np.max(np.sum((new - centroids) ** 2, axis=1)))
        centroids = new
        if shift < tol:
            break
    d2 = _sq_dists(x, centroids)
    inertia = float(d2.min(axis=1).sum())
    history.append(inertia)
    return Codebook(centroids, inertia, history)


def encode(vectors: np.ndarray, book: Codebook, aggregate: bool = True) -> np.ndarray:
    """Triangle distance encoding: f_j = max(0, mean(d) - d_j) per descriptor.

    With `aggregate` the per-descriptor encodings are mean-pooled into one
    k-dimensional vector for the image.
    """
    x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if x.shape[1] != book.dim:
        raise ValueError(f"descriptor dim {x.shape[1]} does not match codebook {book.dim}")
    d = np.sqrt(_sq_dists(x, book.centroids))
    f = np.maximum(0.0, d.mean(axis=1, keepdims=True) - d)
    return f.mean(axis=0) if aggregate else f


# -- KMB1 codebook file and encoded-dataset CSV --------------------------------


def save_codebook(book: Codebook, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(b"KMB1")
        fh.write(struct.pack("<II", book.k, book.dim))
        fh.write(book.centroids.astype("<f8").tobytes())


def load_codebook(path: str | Path) -> Codebook:
    with open(path, "rb") as fh:
        if fh.read(4) != b"KMB1":
            raise ValueError(f"{path}: not a KMB1 codebook")
        k, dim = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(8 * k * dim), dtype="<f8").reshape(k, dim).copy()
    return Codebook(data, inertia=0.0)


def write_encoded_csv(path: str | Path, source_ids, labels, encodings: np.ndarray) -> None:
    encodings = np.atleast_2d(encodings)
    k = encodings.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source_id", "label"] + [f"f{j + 1}" for j in range(k)])
        for sid, label, row in zip(source_ids, labels, encodings):
            writer.writerow([sid, label] + [f"{v:.9g}" for v in row])


def read_encoded_csv(path: str | Path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        ids, labels, rows = [], [], []
        for row in reader:
            ids.append(row[0])
            labels.append(int(row[1]))
            rows.append([float(v) for v in row[2:]])
    return ids, np.array(labels), np.array(rows)
