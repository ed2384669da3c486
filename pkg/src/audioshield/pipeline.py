"""End-to-end assembly: spectrogram images, the three classifiers, and the
per-fold attack protocol shared by the evaluation harness and the CLI.

The shared input space is the color-compensated, highboost-filtered
spectrogram image; the low-rank (SVD) and denoiser (CDA) smoothing are the
proposed model's own inference-time defenses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attacks import (
    AttackConfig,
    AttackReport,
    GradientModel,
    attack_batch,
    cwa_batch,
    label_flip_multiclass,
)
from .audio_io import AudioClip
from .config import PipelineConfig
from .features import ZoningPlan, encode, extract_descriptors, kmeanspp_fit
from .imaging import ColorSpectrogram, color_compensate, highboost, svd_smooth
from .neural import (
    NeuralNet,
    TrainConfig,
    backward_through,
    build_cda,
    build_surrogate_cnn,
    forward,
    forward_with_caches,
    gradient_input,
    train,
    train_denoiser,
)
from .spectra import (
    DwtParams,
    Spectrogram,
    StftParams,
    crp,
    dwt_spectrogram,
    mfcc,
    minmax_normalize,
    pool,
    resize_bilinear,
    stft,
)
from .svm import KernelSpec, MulticlassSvm, multiclass_train

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, 3, rows, cols) in [0, 1]
    labels: np.ndarray
    source_ids: list[str]
    variants: list[str]

    def __len__(self):
        return self.images.shape[0]

    def subset(self, mask) -> "ImageDataset":
        idx = np.flatnonzero(mask)
        return ImageDataset(
            self.images[idx],
            self.labels[idx],
            [self.source_ids[i] for i in idx],
            [self.variants[i] for i in idx],
        )


def clip_spectrograms(clip: AudioClip, cfg: PipelineConfig) -> list[tuple[str, Spectrogram]]:
    """The configured raw 2-D representations of one clip."""
    sc = cfg.spectra
    if sc.representation == "dwt":
        p = DwtParams(
            n_scales=sc.n_scales,
            morlet_factor=sc.morlet_factor,
            hop=sc.dwt_hop,
            max_scale=sc.max_scale if sc.max_scale > 0 else None,
        )
        return [(scale, dwt_spectrogram(clip, p, scale)) for scale in sc.mag_scales]
    sp = StftParams(window_len=sc.stft_window, hop=sc.stft_hop)
    if sc.representation == "stft":
        return [("stft", stft(clip, sp))]
    if sc.representation == "pool":
        return [("pool", pool(stft(clip, sp), mfcc(clip, sp), crp(clip)))]
    raise ValueError(f"unknown representation {sc.representation!r}")


def build_image_variants(clip: AudioClip, cfg: PipelineConfig) -> list[tuple[str, np.ndarray]]:
    """All (variant name, 3xRxC image) samples one clip expands into."""
    im = cfg.imaging
    shape = (im.image_rows, im.image_cols)
    out = []
    for name, sp in clip_spectrograms(clip, cfg):
        resized = Spectrogram(resize_bilinear(sp.data, *shape), sp.kind, sp.mag_scale, sp.rate)
        if im.color_comp and cfg.spectra.representation == "dwt":
            for palette in im.palettes:
                img = color_compensate(resized, palette, cfg.palette_c(palette))
                if im.highboost_c > 0:
                    img = highboost(img, im.highboost_c)
                out.append((f"{name}_{palette.lower()}", img.channels))
        else:
            gray = minmax_normalize(resized.data)
            channels = np.stack([gray, gray, gray])
            if im.highboost_c > 0:
                channels = highboost(ColorSpectrogram(channels, "GRAY"), im.highboost_c).channels
            out.append((name, channels))
    return out


def build_image_dataset(clips: list[AudioClip], cfg: PipelineConfig) -> ImageDataset:
    images, labels, sources, variants = [], [], [], []
    for clip in clips:
        for name, channels in build_image_variants(clip, cfg):
            images.append(channels)
            labels.append(-1 if clip.label is None else clip.label)
            sources.append(clip.source_id)
            variants.append(name)
    return ImageDataset(np.array(images), np.array(labels), sources, variants)


def to_gray(images: np.ndarray) -> np.ndarray:
    return np.tensordot(LUMA, images, axes=([0], [1]))


class SurrogateCnn(GradientModel):
    """Small CNN classifier in image space; the deep-attack target."""

    def __init__(self, cfg: PipelineConfig, n_classes: int, seed: int = 0):
        self.cfg = cfg
        self.n_classes = n_classes
        self.seed = seed
        self.net: NeuralNet | None = None

    def fit(self, images: np.ndarray, labels: np.ndarray) -> "SurrogateCnn":
        nc = self.cfg.neural
        shape = images.shape[1:]
        self.net = build_surrogate_cnn(
            shape, self.n_classes, tuple(nc.cnn_filters), nc.cnn_hidden, seed=self.seed
        )
        tc = TrainConfig(
            epochs=nc.cnn_epochs,
            batch_size=nc.cnn_batch,
            learning_rate=nc.cnn_lr,
            loss="cross_entropy",
            early_stop_patience=max(5, nc.cnn_epochs // 4),
        )
        train(self.net, (images, labels), tc)
        return self

    def _logits_net(self) -> NeuralNet:
        return NeuralNet(self.net.layers[:-1], self.net.rng_seed, self.net.input_shape)

    def scores(self, x: np.ndarray) -> np.ndarray:
        return forward(self._logits_net(), x[None])[0]

    def predict(self, x: np.ndarray) -> int:
        return int(np.argmax(self.scores(x)))

    def predict_batch(self, images: np.ndarray) -> np.ndarray:
        return np.argmax(forward(self.net, images), axis=1)

    def grad_loss(self, x: np.ndarray, label: int) -> np.ndarray:
        return gradient_input(self.net, x, label, loss="cross_entropy")

    def grad_scores(self, x: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
        logits = self._logits_net()
        _, caches = forward_with_caches(logits, x[None])
        gin, _ = backward_through(logits, caches, np.asarray(coeffs, dtype=np.float64)[None])
        return gin[0]

    def scores_batch(self, xs: np.ndarray) -> np.ndarray:
        return forward(self._logits_net(), xs)

    def grad_scores_batch(self, xs: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
        logits = self._logits_net()
        _, caches = forward_with_caches(logits, xs)
        gin, _ = backward_through(logits, caches, np.asarray(coeffs, dtype=np.float64))
        return gin

    def refit(self, images, labels) -> "SurrogateCnn":
        return SurrogateCnn(self.cfg, self.n_classes, self.seed).fit(images, labels)


class RawPixelSvm:
    """Linear one-vs-rest SVM on flattened images; the shallow baseline."""

    def __init__(self, cfg: PipelineConfig, n_classes: int):
        self.cfg = cfg
        self.n_classes = n_classes
        self.msvm: MulticlassSvm | None = None

    @staticmethod
    def flatten(images: np.ndarray) -> np.ndarray:
        return np.asarray(images, dtype=np.float64).reshape(images.shape[0], -1)

    def fit(self, images: np.ndarray, labels: np.ndarray) -> "RawPixelSvm":
        self.msvm = multiclass_train(
            self.flatten(images), labels, KernelSpec("linear"), self.cfg.svm.raw_cost
        )
        return self

    def predict(self, x: np.ndarray) -> int:
        return int(self.msvm.predict(np.asarray(x, dtype=np.float64).ravel()))

    def predict_batch(self, images: np.ndarray) -> np.ndarray:
        return self.msvm.predict(self.flatten(images))

    def refit(self, images, labels) -> "RawPixelSvm":
        return RawPixelSvm(self.cfg, self.n_classes).fit(images, labels)


class ProposedPipeline:
    """SVD + CDA smoothing, dense SURF, codebook encoding, polynomial SVM."""

    def __init__(self, cfg: PipelineConfig, n_classes: int, seed: int = 0):
        self.cfg = cfg
        self.n_classes = n_classes
        self.seed = seed
        self.denoiser: NeuralNet | None = None
        self.codebook = None
        self.msvm: MulticlassSvm | None = None
        self.feat_mean: np.ndarray | None = None
        self.feat_std: np.ndarray | None = None

    # smoothing -----------------------------------------------------------

    def _svd_images(self, images: np.ndarray) -> np.ndarray:
        n_prime = self.cfg.imaging.svd_n_prime
        out = np.empty_like(images)
        for i, img in enumerate(images):
            for c in range(img.shape[0]):
                out[i, c] = np.clip(svd_smooth(img[c], n_prime), 0.0, 1.0)
        return out

    def smooth(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if self.cfg.imaging.svd:
            x = self._svd_images(x)
        if self.cfg.neural.cda and self.denoiser is not None:
            x = np.clip(forward(self.denoiser, x), 0.0, 1.0)
        return x

    # fitting ---------------------------------------------------------------

    def _fit_denoiser(self, images: np.ndarray) -> None:
        nc = self.cfg.neural
        self.denoiser = build_cda(
            images.shape[1:], tuple(nc.cda_filters), nc.cda_dropout, seed=self.seed + 11
        )
        tc = TrainConfig(
            epochs=nc.cda_epochs,
            batch_size=nc.cda_batch,
            learning_rate=nc.cda_lr,
            loss="mse",
            early_stop_patience=max(3, nc.cda_epochs // 3),
        )
        extra = self._svd_images(images) if self.cfg.imaging.svd else None
        train_denoiser(self.denoiser, images, tc, mask_rate=nc.cda_mask_rate, extra_corrupted=extra)

    def encode_images(self, images: np.ndarray) -> np.ndarray:
        """Standardized codebook encodings of (smoothed) images."""
        feats = self._raw_encode(images)
        return (feats - self.feat_mean) / self.feat_std

    def _raw_encode(self, images: np.ndarray) -> np.ndarray:
        plan = ZoningPlan(list(self.cfg.features.zone_sizes), list(self.cfg.features.strides))
        grays = to_gray(self.smooth(images))
        return np.stack([encode(extract_descriptors(g, plan), self.codebook) for g in grays])

    def fit(self, images: np.ndarray, labels: np.ndarray) -> "ProposedPipeline":
        fc = self.cfg.features
        if self.cfg.neural.cda:
            self._fit_denoiser(images)
        plan = ZoningPlan(list(fc.zone_sizes), list(fc.strides))
        grays = to_gray(self.smooth(images))
        descriptors = np.concatenate([extract_descriptors(g, plan) for g in grays], axis=0)
        rng = np.random.default_rng(self.seed + 23)
        if descriptors.shape[0] > fc.max_descriptors:
            pick = rng.choice(descriptors.shape[0], fc.max_descriptors, replace=False)
            descriptors = descriptors[pick]
        self.codebook = kmeanspp_fit(descriptors, fc.codebook_k, seed=self.seed + 31)
        feats = np.stack([encode(extract_descriptors(g, plan), self.codebook) for g in grays])
        self.feat_mean = feats.mean(axis=0)
        self.feat_std = feats.std(axis=0) + 1e-12
        self._fit_svm((feats - self.feat_mean) / self.feat_std, labels)
        return self

    def _fit_svm(self, feats: np.ndarray, labels: np.ndarray) -> None:
        sc = self.cfg.svm
        spec = KernelSpec(sc.kernel, degree=sc.degree, offset=sc.offset, gamma=sc.gamma)
        self.msvm = multiclass_train(feats, labels, spec, sc.cost)

    def predict(self, x: np.ndarray) -> int:
        return int(self.msvm.predict(self.encode_images(np.asarray(x)[None])[0]))

    def predict_batch(self, images: np.ndarray) -> np.ndarray:
        return self.msvm.predict(self.encode_images(images))

    def refit_labels(self, images, labels) -> "ProposedPipeline":
        """Retrain only the label-dependent stage (the SVM) on poisoned labels;
        the smoothing and the codebook are unsupervised and stay."""
        other = ProposedPipeline(self.cfg, self.n_classes, self.seed)
        other.denoiser = self.denoiser
        other.codebook = self.codebook
        other.feat_mean = self.feat_mean
        other.feat_std = self.feat_std
        other._fit_svm(other.encode_images(np.asarray(images)), labels)
        return other

    # persistence helpers used by the CLI ----------------------------------

    def feature_matrix(self, images: np.ndarray) -> np.ndarray:
        return self.encode_images(images)


MODEL_NAMES = ("cnn", "rawsvm", "proposed")


@dataclass
class FoldResult:
    accuracy: dict[str, float]
    fooling: dict[str, dict[str, float]]
    reports: dict[str, list[AttackReport]] = field(default_factory=dict)


def _deep_cfg(cfg: PipelineConfig, seed: int) -> AttackConfig:
    a = cfg.attacks
    return AttackConfig(
        epsilon=a.epsilon,
        max_iters=a.max_iters,
        step=a.step,
        cwa_inner_steps=a.cwa_inner_steps,
        cwa_binary_steps=a.cwa_binary_steps,
        cwa_lr=a.cwa_lr,
        cwa_c_lo=a.cwa_c_lo,
        cwa_c_hi=a.cwa_c_hi,
        seed=seed,
    )


def _evasion_cfg(cfg: PipelineConfig, seed: int) -> AttackConfig:
    a = cfg.attacks
    return AttackConfig(step=a.evasion_step, max_iters=a.evasion_iters, seed=seed)


def train_models(cfg: PipelineConfig, train_ds: ImageDataset, n_classes: int, seed: int):
    cnn = SurrogateCnn(cfg, n_classes, seed=seed).fit(train_ds.images, train_ds.labels)
    raw = RawPixelSvm(cfg, n_classes).fit(train_ds.images, train_ds.labels)
    proposed = ProposedPipeline(cfg, n_classes, seed=seed).fit(train_ds.images, train_ds.labels)
    return {"cnn": cnn, "rawsvm": raw, "proposed": proposed}


def craft_attacks(
    cfg: PipelineConfig,
    models: dict,
    test_ds: ImageDataset,
    seed: int,
) -> dict[str, list[AttackReport]]:
    """Craft the configured per-sample attacks; deep attacks target the CNN in
    pixel space, evasion targets the raw linear SVM (also pixel space) so the
    artifacts transfer to every victim."""
    out: dict[str, list[AttackReport]] = {}
    xs = list(test_ds.images)
    ys = list(test_ds.labels)
    ids = test_ds.source_ids
    deep_cfg = _deep_cfg(cfg, seed)
    for attack in cfg.attacks.attacks:
        if attack == "cwa":
            # same seeded wrong-label draw as attack_batch, vectorized descent
            rng = np.random.default_rng(deep_cfg.seed)
            n_classes = models["cnn"].n_classes
            targets = [int(rng.choice([c for c in range(n_classes) if c != int(y)])) for y in ys]
            reports = cwa_batch(models["cnn"], np.stack(xs), ys, deep_cfg, targets=targets)
            for r, sid in zip(reports, ids):
                r.source_id = sid
            out[attack] = reports
        elif attack in ("fgsm", "bim_a", "bim_b"):
            out[attack] = attack_batch(models["cnn"], (xs, ys, ids), attack, deep_cfg)
        elif attack == "evasion":
            ecfg = _evasion_cfg(cfg, seed)
            flat = [x.ravel() for x in xs]
            reports = attack_batch(models["rawsvm"].msvm, (flat, ys, ids), "evasion", ecfg)
            for r in reports:
                r.original = r.original.reshape(test_ds.images.shape[1:])
                r.adversarial = np.clip(r.adversarial.reshape(test_ds.images.shape[1:]), 0.0, 1.0)
            out[attack] = reports
    return out


def run_fold(
    cfg: PipelineConfig,
    train_ds: ImageDataset,
    test_ds: ImageDataset,
    n_classes: int,
    seed: int,
    models: dict | None = None,
    crafted: dict[str, list[AttackReport]] | None = None,
) -> FoldResult:
    """Train the three models, craft the attack suite, and score everything.

    `models` / `crafted` may be injected to reuse work across ablation runs
    that only change the proposed model's own smoothing stages.
    """
    if models is None:
        models = train_models(cfg, train_ds, n_classes, seed)
    accuracy = {
        name: 100.0 * float(np.mean(m.predict_batch(test_ds.images) == test_ds.labels))
        for name, m in models.items()
    }
    if crafted is None:
        crafted = craft_attacks(cfg, models, test_ds, seed)
    fooling: dict[str, dict[str, float]] = {name: {} for name in models}
    for attack, reports in crafted.items():
        advs = np.stack([r.adversarial for r in reports])
        truth = np.array([r.label_before for r in reports])
        for name, m in models.items():
            fooling[name][attack] = 100.0 * float(np.mean(m.predict_batch(advs) != truth))
    if "lfa" in cfg.attacks.attacks:
        budget = float(np.ceil(cfg.attacks.lfa_budget_frac * len(train_ds)))
        lcfg = AttackConfig(lfa_budget=budget, lfa_gamma=cfg.attacks.lfa_gamma, seed=seed)
        poisoned, _ = label_flip_multiclass(
            RawPixelSvm.flatten(train_ds.images),
            train_ds.labels,
            lcfg,
            KernelSpec("linear"),
            cfg.svm.raw_cost,
        )
        for name, m in models.items():
            victim = m.refit_labels(train_ds.images, poisoned) if name == "proposed" else m.refit(
                train_ds.images, poisoned
            )
            fooling[name]["lfa"] = 100.0 * float(
                np.mean(victim.predict_batch(test_ds.images) != test_ds.labels)
            )
    return FoldResult(accuracy, fooling, crafted)
