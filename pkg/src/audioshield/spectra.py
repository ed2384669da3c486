"""2-D audio representations: STFT, Morlet wavelet, MFCC, recurrence plots, pooling.

All builders return a :class:`Spectrogram` whose rows index frequency (or
scale) bins and whose columns index time steps.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.signal import fftconvolve

from .audio_io import AudioClip

KIND_STFT = "stft"
KIND_DWT = "dwt"
KIND_MFCC = "mfcc"
KIND_CRP = "crp"
KIND_POOL = "pool"
KIND_IMAGE = "image"  # raw color channel, used for pipeline transport

SCALE_NONE = "none"
SCALE_LINEAR = "linear"
SCALE_LOG = "logarithmic"
SCALE_LOG_REAL = "logarithmic_real"

MAG_SCALES = (SCALE_LINEAR, SCALE_LOG, SCALE_LOG_REAL)

LOG_FLOOR = 1e-10

_KIND_CODES = {KIND_STFT: 1, KIND_DWT: 2, KIND_MFCC: 3, KIND_CRP: 4, KIND_POOL: 5, KIND_IMAGE: 6}
_SCALE_CODES = {SCALE_NONE: 0, SCALE_LINEAR: 1, SCALE_LOG: 2, SCALE_LOG_REAL: 3}
_KIND_FROM_CODE = {v: k for k, v in _KIND_CODES.items()}
_SCALE_FROM_CODE = {v: k for k, v in _SCALE_CODES.items()}


@dataclass
class Spectrogram:
    data: np.ndarray
    kind: str
    mag_scale: str = SCALE_NONE
    rate: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise ValueError("spectrogram data must be a non-empty 2-D matrix")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("spectrogram contains non-finite entries")
        if self.kind == KIND_POOL and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ValueError("pooled spectrogram entries must lie in [0, 1]")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class StftParams:
    window_len: int = 400
    hop: int = 200

    def __post_init__(self):
        if not 0 < self.hop <= self.window_len:
            raise ValueError("need 0 < hop <= window_len")


@dataclass
class DwtParams:
    n_scales: int = 256
    morlet_factor: float = 0.8431
    max_scale: float | None = None  # resolved against the clip when None
    hop: int = 1

    def __post_init__(self):
        if self.n_scales < 1:
            raise ValueError("n_scales must be >= 1")
        if self.morlet_factor <= 0:
            raise ValueError("morlet_factor must be positive")
        if self.hop < 1:
            raise ValueError("hop must be >= 1")


def stft(clip: AudioClip, p: StftParams) -> Spectrogram:
    """Log-magnitude Hanning-window STFT.

    Output has window_len//2 + 1 rows and floor((N - window_len)/hop) + 1
    columns; magnitudes are floored at 1e-10 before the log.
    """
    n = len(clip)
    if n < p.window_len:
        raise ValueError(f"clip of {n} samples shorter than one window ({p.window_len})")
    n_frames = (n - p.window_len) // p.hop + 1
    window = np.hanning(p.window_len)
    idx = p.hop * np.arange(n_frames)[:, None] + np.arange(p.window_len)[None, :]
    frames = clip.samples[idx] * window
    mag = np.abs(np.fft.rfft(frames, axis=1)).T
    data = np.log(np.maximum(mag, LOG_FLOOR))
    return Spectrogram(
        data,
        KIND_STFT,
        rate=clip.sample_rate,
        params={"window_len": p.window_len, "hop": p.hop},
    )


def morlet(t: np.ndarray | float, factor: float = 0.8431) -> np.ndarray:
    """Mother wavelet: a Gaussian envelope times cos(pi*t); morlet(0) == 1."""
    t = np.asarray(t, dtype=np.float64)
    return np.exp(-(factor**2) * t**2 / 2.0) * np.cos(np.pi * t)


def morlet_wavelet(scale: float, factor: float = 0.8431) -> np.ndarray:
    """Discretized wavelet at `scale`: morlet(t/scale)/sqrt(scale) over its support.

    The support is truncated where the Gaussian envelope falls below 1e-8.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    half = int(np.ceil(scale * np.sqrt(2.0 * np.log(1e8)) / factor))
    t = np.arange(-half, half + 1, dtype=np.float64)
    return morlet(t / scale, factor) / np.sqrt(scale)


def dyadic_scales(n_scales: int, max_scale: float) -> np.ndarray:
    """Scale grid 2**e with e evenly spaced on [0, log2(max_scale)]."""
    if max_scale < 1.0:
        raise ValueError("max_scale must be >= 1")
    if n_scales == 1:
        return np.array([1.0])
    exponents = np.linspace(0.0, np.log2(max_scale), n_scales)
    return 2.0**exponents


def apply_mag_scale(coeffs: np.ndarray, mag_scale: str) -> np.ndarray:
    """Map raw (pre-squared) wavelet coefficients to the displayed magnitude.

    linear           -> coeffs**2
    logarithmic      -> log(1 + coeffs**2)
    logarithmic_real -> sign(coeffs) * log(1 + coeffs**2)
    """
    sq = coeffs**2
    if mag_scale == SCALE_LINEAR:
        return sq
    if mag_scale == SCALE_LOG:
        return np.log1p(sq)
    if mag_scale == SCALE_LOG_REAL:
        return np.sign(coeffs) * np.log1p(sq)
    raise ValueError(f"unknown magnitude scale {mag_scale!r}")


def dwt_spectrogram(clip: AudioClip, p: DwtParams, mag_scale: str = SCALE_LINEAR) -> Spectrogram:
    """Wavelet spectrogram: one row per dyadic scale of the Morlet correlation."""
    n = len(clip)
    max_scale = p.max_scale
    if max_scale is None:
        max_scale = float(max(2.0, min(256.0, n / 4.0)))
    scales = dyadic_scales(p.n_scales, max_scale)
    cols = np.arange(0, n, p.hop)
    rows = np.empty((p.n_scales, cols.size), dtype=np.float64)
    for i, s in enumerate(scales):
        w = morlet_wavelet(s, p.morlet_factor)
        # correlation = convolution with the reversed kernel
        coeffs = fftconvolve(clip.samples, w[::-1], mode="same")
        rows[i] = coeffs[cols]
    data = apply_mag_scale(rows, mag_scale)
    return Spectrogram(
        data,
        KIND_DWT,
        mag_scale=mag_scale,
        rate=clip.sample_rate,
        params={
            "n_scales": p.n_scales,
            "morlet_factor": p.morlet_factor,
            "max_scale": max_scale,
            "hop": p.hop,
        },
    )


def mel_filterbank(n_mels: int, n_fft_bins: int, rate: int) -> np.ndarray:
    """Triangular mel filters (rows) over rfft bins (cols), 0..rate/2."""
    mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)
    inv = lambda m: 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    edges = inv(np.linspace(mel(0.0), mel(rate / 2.0), n_mels + 2))
    freqs = np.linspace(0.0, rate / 2.0, n_fft_bins)
    bank = np.zeros((n_mels, n_fft_bins))
    for i in range(n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (freqs - lo) / max(mid - lo, 1e-12)
        down = (hi - freqs) / max(hi - mid, 1e-12)
        bank[i] = np.maximum(0.0, np.minimum(up, down))
    return bank


def mfcc(
    clip: AudioClip,
    p: StftParams | None = None,
    n_mels: int = 40,
    n_coeffs: int = 13,
) -> Spectrogram:
    """Mel-frequency cepstra: power STFT -> mel filters -> log -> DCT-II."""
    if p is None:
        p = StftParams(window_len=max(16, int(round(0.025 * clip.sample_rate))))
        p = StftParams(window_len=p.window_len, hop=max(1, p.window_len // 2))
    n = len(clip)
    if n < p.window_len:
        raise ValueError(f"clip of {n} samples shorter than one frame ({p.window_len})")
    n_frames = (n - p.window_len) // p.hop + 1
    window = np.hanning(p.window_len)
    idx = p.hop * np.arange(n_frames)[:, None] + np.arange(p.window_len)[None, :]
    power = np.abs(np.fft.rfft(clip.samples[idx] * window, axis=1)) ** 2
    bank = mel_filterbank(n_mels, power.shape[1], clip.sample_rate)
    logmel = np.log(np.maximum(power @ bank.T, LOG_FLOOR))
    coeffs = dct(logmel, type=2, axis=1)[:, :n_coeffs].T
    return Spectrogram(
        coeffs,
        KIND_MFCC,
        rate=clip.sample_rate,
        params={"window_len": p.window_len, "hop": p.hop, "n_mels": n_mels, "n_coeffs": n_coeffs},
    )


def crp(
    clip: AudioClip,
    dim: int = 3,
    delay: int = 8,
    eps: float | None = None,
    max_size: int = 512,
) -> Spectrogram:
    """Binary recurrence plot of the time-delay-embedded (downsampled) signal.

    Entry (i, j) is 1 when the embedded states are within `eps`; eps defaults
    to 10% of the embedded point-cloud diameter.
    """
    n = len(clip)
    if n <= dim * delay:
        raise ValueError(f"clip of {n} samples too short to embed (dim={dim}, delay={delay})")
    step = max(1, int(np.ceil(n / (max_size + (dim - 1) * delay))))
    x = clip.samples[::step]
    m = x.size - (dim - 1) * delay
    if m < 2:
        raise ValueError("downsampled signal too short to embed")
    emb = np.stack([x[i * delay : i * delay + m] for i in range(dim)], axis=1)
    diff = emb[:, None, :] - emb[None, :, :]
    dists = np.sqrt(np.sum(diff**2, axis=2))
    if eps is None:
        eps = 0.1 * float(dists.max())
    data = (dists <= eps).astype(np.float64)
    return Spectrogram(
        data,
        KIND_CRP,
        rate=clip.sample_rate,
        params={"dim": dim, "delay": delay, "eps": float(eps), "downsample": step},
    )


def minmax_normalize(a: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant array maps to all zeros."""
    lo = float(a.min())
    hi = float(a.max())
    if hi - lo <= 0.0:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def resize_bilinear(a: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Bilinear resize with endpoint-aligned sampling."""
    a = np.asarray(a, dtype=np.float64)
    r_in, c_in = a.shape
    r_pos = np.linspace(0.0, r_in - 1.0, rows) if rows > 1 else np.zeros(1)
    c_pos = np.linspace(0.0, c_in - 1.0, cols) if cols > 1 else np.zeros(1)
    r0 = np.minimum(np.floor(r_pos).astype(int), r_in - 1)
    c0 = np.minimum(np.floor(c_pos).astype(int), c_in - 1)
    r1 = np.minimum(r0 + 1, r_in - 1)
    c1 = np.minimum(c0 + 1, c_in - 1)
    fr = (r_pos - r0)[:, None]
    fc = (c_pos - c0)[None, :]
    top = a[np.ix_(r0, c0)] * (1 - fc) + a[np.ix_(r0, c1)] * fc
    bot = a[np.ix_(r1, c0)] * (1 - fc) + a[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bot * fr


def pool(stft_sp: Spectrogram, mfcc_sp: Spectrogram, crp_sp: Spectrogram) -> Spectrogram:
    """Sum the three normalized representations on a common grid, clipped to [0, 1]."""
    rows, cols = stft_sp.shape
    total = np.zeros((rows, cols))
    for sp in (stft_sp, mfcc_sp, crp_sp):
        total += resize_bilinear(minmax_normalize(sp.data), rows, cols)
    data = np.clip(total, 0.0, 1.0)
    return Spectrogram(data, KIND_POOL, rate=stft_sp.rate, params={"rows": rows, "cols": cols})


# -- SPG1 binary format -------------------------------------------------------
# 16-byte header: magic "SPG1", u32 rows, u32 cols, u32 code (all little-endian)
# where code = kind | (mag_scale << 8); then row-major float32 data. Parameters
# go to a UTF-8 sidecar `<path>.params.txt` with one `key = json` line each.


def save_spg(sp: Spectrogram, path: str | Path, sidecar: bool = True) -> None:
    rows, cols = sp.shape
    code = _KIND_CODES[sp.kind] | (_SCALE_CODES[sp.mag_scale] << 8)
    with open(path, "wb") as fh:
        fh.write(b"SPG1")
        fh.write(struct.pack("<III", rows, cols, code))
        fh.write(sp.data.astype("<f4").tobytes())
    if sidecar:
        lines = [f"rate = {json.dumps(sp.rate)}"]
        for k in sorted(sp.params):
            lines.append(f"{k} = {json.dumps(sp.params[k])}")
        Path(str(path) + ".params.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_spg(path: str | Path) -> Spectrogram:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != b"SPG1":
            raise ValueError(f"{path}: bad magic {magic!r}")
        rows, cols, code = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(rows * cols * 4), dtype="<f4")
    if data.size != rows * cols:
        raise ValueError(f"{path}: truncated payload")
    kind = _KIND_FROM_CODE.get(code & 0xFF)
    mag_scale = _SCALE_FROM_CODE.get((code >> 8) & 0xFF)
    if kind is None or mag_scale is None:
        raise ValueError(f"{path}: unknown kind/scale code {code}")
    params = {}
    rate = 0
    side = Path(str(path) + ".params.txt")
    if side.exists():
        for line in side.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            key, _, val = line.partition("=")
            params[key.strip()] = json.loads(val.strip())
        rate = int(params.pop("rate", 0))
    return Spectrogram(data.reshape(rows, cols).astype(np.float64), kind, mag_scale, rate, params)
