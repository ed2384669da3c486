"""Audio loading, synthesis, pitch-shift augmentation, and dataset manifests.

Everything here works on plain 16-bit PCM WAV files (mono or stereo) via the
stdlib ``wave`` module; amplitudes live in [-1, 1] as float64.
"""

from __future__ import annotations

import csv
import json
import wave
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

PCM_SCALE = 32768.0

# Suffix glued onto augmented file stems; manifests recover the source id by
# stripping it so that fold splits never separate a clip from its variants.
AUGMENT_TAG = "_ps"


class WavFormatError(Exception):
    """The file is not a parseable RIFF/WAV container."""


class UnsupportedWavError(WavFormatError):
    """The WAV encoding is not 16-bit PCM with 1 or 2 channels."""


@dataclass
class AudioClip:
    """A sampled waveform with rate and optional class label."""

    samples: np.ndarray
    sample_rate: int
    label: int | None = None
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("clip needs a non-empty 1-D sample array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("clip contains non-finite amplitudes")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be a positive integer")
        self.sample_rate = int(self.sample_rate)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class ManifestEntry:
    path: str
    class_id: int
    fold: int | None = None
    source_id: str = ""

    def __post_init__(self):
        if not self.source_id:
            self.source_id = strip_augment_tag(Path(self.path).stem)


@dataclass
class DatasetManifest:
    """List of labeled audio files plus the ordered class-name table."""

    entries: list[ManifestEntry]
    class_names: list[str]

    def __post_init__(self):
        n = len(self.class_names)
        for e in self.entries:
            if not 0 <= e.class_id < n:
                raise ValueError(f"class id {e.class_id} outside class_names")
        folds = [e.fold for e in self.entries]
        if any(f is not None for f in folds) and any(f is None for f in folds):
            raise ValueError("folds must cover all entries or none")

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> list[int]:
        return [e.class_id for e in self.entries]


def strip_augment_tag(stem: str) -> str:
    idx = stem.rfind(AUGMENT_TAG)
    return stem[:idx] if idx > 0 else stem


def load_wav(path: str | Path) -> AudioClip:
    """Read a 16-bit PCM WAV file; stereo is averaged to mono."""
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            sample_width = wf.getsampwidth()
            rate = wf.getframerate()
            comp = wf.getcomptype()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"cannot parse {path}: {exc}") from exc
    if comp != "NONE":
        raise UnsupportedWavError(f"{path}: compressed WAV ({comp}) not supported")
    if sample_width != 2:
        raise UnsupportedWavError(f"{path}: only 16-bit PCM supported, got {8 * sample_width}-bit")
    if n_channels not in (1, 2):
        raise UnsupportedWavError(f"{path}: {n_channels} channels, expected mono or stereo")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    if data.size == 0:
        raise WavFormatError(f"{path}: no audio frames")
    if n_channels == 2:
        data = data.reshape(-1, 2).mean(axis=1)
    return AudioClip(data / PCM_SCALE, rate, source_id=Path(path).stem)


def write_wav(clip: AudioClip, path: str | Path) -> None:
    """Write mono 16-bit PCM; round-trips with load_wav within 1/32768."""
    ints = np.clip(np.rint(clip.samples * PCM_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(ints.tobytes())


def synth_tone(
    freq: float,
    duration: float,
    rate: int,
    amplitude: float = 0.8,
    label: int | None = None,
    source_id: str = "",
) -> AudioClip:
    """Pure sinusoid: samples[n] = amplitude * sin(2*pi*freq*n/rate)."""
    if not 0 < freq < rate / 2:
        raise ValueError(f"freq must lie in (0, rate/2), got {freq} at rate {rate}")
    n = int(round(duration * rate))
    t = np.arange(n)
    samples = amplitude * np.sin(2.0 * np.pi * freq * t / rate)
    return AudioClip(samples, rate, label=label, source_id=source_id)


def pitch_shift(clip: AudioClip, scale: float) -> AudioClip:
    """Resample by `scale` with linear interpolation.

    Duration and pitch change together: a tone at f becomes a tone at
    f*scale played at the original rate, and the length becomes
    round(N/scale).
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    n = len(clip)
    out_len = max(1, int(round(n / scale)))
    positions = np.arange(out_len) * scale
    out = np.interp(positions, np.arange(n), clip.samples)
    return replace(clip, samples=out)


def augment_dataset(
    manifest: DatasetManifest, scales: list[float], out_dir: str | Path
) -> DatasetManifest:
    """Add one pitch-shifted WAV per scale for every entry (labels kept).

    Variant files are written to ``out_dir`` as ``<stem>_ps<scale>.wav``;
    their source_id stays that of the original clip.
    """
    if not scales:
        raise ValueError("scales must be non-empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries: list[ManifestEntry] = []
    for e in manifest.entries:
        entries.append(e)
        clip = load_wav(e.path)
        for s in scales:
            shifted = pitch_shift(clip, s)
            tag = f"{s:g}".replace(".", "p")
            dest = out_dir / f"{Path(e.path).stem}{AUGMENT_TAG}{tag}.wav"
            write_wav(shifted, dest)
            entries.append(
                ManifestEntry(str(dest), e.class_id, fold=e.fold, source_id=e.source_id)
            )
    return DatasetManifest(entries, list(manifest.class_names))


# -- manifest files: CSV `path,class_id,fold` + JSON class-name sidecar ------


def write_manifest(manifest: DatasetManifest, csv_path: str | Path, names_path: str | Path) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "class_id", "fold"])
        for e in manifest.entries:
            writer.writerow([e.path, e.class_id, "" if e.fold is None else e.fold])
    with open(names_path, "w", encoding="utf-8") as fh:
        json.dump(list(manifest.class_names), fh)
        fh.write("\n")


def read_manifest(csv_path: str | Path, names_path: str | Path) -> DatasetManifest:
    with open(names_path, encoding="utf-8") as fh:
        class_names = json.load(fh)
    if not isinstance(class_names, list):
        raise WavFormatError(f"{names_path}: expected a JSON list of class names")
    entries = []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["path", "class_id"]:
            raise WavFormatError(f"{csv_path}: missing `path,class_id,fold` header")
        for row in reader:
            if not row:
                continue
            fold = None
            if len(row) > 2 and row[2].strip():
                fold = int(row[2])
            entries.append(ManifestEntry(row[0], int(row[1]), fold=fold))
    return DatasetManifest(entries, class_names)


def load_manifest_clips(manifest: DatasetManifest) -> list[AudioClip]:
    """Load every entry; labels and source ids are attached to the clips."""
    clips = []
    for e in manifest.entries:
        clip = load_wav(e.path)
        clips.append(replace(clip, label=e.class_id, source_id=e.source_id))
    return clips


def synthetic_tone_clips(
    n_per_class: int,
    seed: int,
    rate: int = 8000,
    duration: float = 1.0,
    freq_band: tuple[float, float] = (950.0, 1250.0),
    noise_sigma: float = 0.05,
    pair_ratio: float = 1.4,
    wobble_depth: float = 0.25,
) -> list[AudioClip]:
    """Three tone classes distinguished by local spectral geometry, not by
    absolute position: a single steady tone, a close pair of tones, and a
    frequency-wobbled tone. The base frequency is random per clip, so only
    the local line shape separates the classes.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * rate))
    t = np.arange(n) / rate
    clips = []
    for cls in range(3):
        for i in range(n_per_class):
            f = rng.uniform(*freq_band)
            amp = rng.uniform(0.5, 0.8)
            phase = rng.uniform(0, 2 * np.pi)
            if cls == 0:  # single steady line
                s = np.sin(2 * np.pi * f * t + phase)
            elif cls == 1:  # close pair of lines
                r = np.sqrt(pair_ratio)
                s = (
                    np.sin(2 * np.pi * (f / r) * t + phase)
                    + np.sin(2 * np.pi * (f * r) * t + rng.uniform(0, 2 * np.pi))
                ) / np.sqrt(2.0)
            else:  # wobbling line (frequency modulation)
                fm_rate = rng.uniform(2.0, 4.0)
                inst_time = t - wobble_depth / (2 * np.pi * fm_rate) * np.cos(2 * np.pi * fm_rate * t)
                s = np.sin(2 * np.pi * f * inst_time + phase)
            samples = amp * s + rng.normal(0.0, noise_sigma, size=n)
            clips.append(
                AudioClip(np.clip(samples, -1, 1), rate, label=cls, source_id=f"tone{cls}_{i:03d}")
            )
    return clips


def synthetic_tone_manifest(
    out_dir: str | Path,
    n_per_class: int,
    seed: int,
    rate: int = 8000,
    duration: float = 1.0,
    freq_band: tuple[float, float] = (950.0, 1250.0),
    noise_sigma: float = 0.05,
) -> DatasetManifest:
    """Write the synthetic tone-geometry dataset as WAVs plus a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for clip in synthetic_tone_clips(n_per_class, seed, rate, duration, freq_band, noise_sigma):
        path = out_dir / f"{clip.source_id}.wav"
        write_wav(clip, path)
        entries.append(ManifestEntry(str(path), clip.label))
    return DatasetManifest(entries, ["single_tone", "tone_pair", "wobble_tone"])
