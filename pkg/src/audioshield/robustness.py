"""Robustness evaluation: LID detectability, fooling rates, the accuracy/
robustness tradeoff distance, rankings, the k-fold harness, and ablations."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .attacks import AttackReport
from .audio_io import AudioClip
from .config import PipelineConfig
from .pipeline import ImageDataset, build_image_dataset, run_fold

# -- local intrinsic dimensionality --------------------------------------------


def lid_score(query: np.ndarray, reference: np.ndarray, k: int) -> float:
    """MLE of the local intrinsic dimension from neighbor distance ratios.

    Zero distances (duplicates of the query) are dropped before ranking; if
    every kept distance equals the k-th one the estimate diverges and +inf is
    returned.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    q = np.asarray(query, dtype=np.float64).ravel()
    ref = np.atleast_2d(np.asarray(reference, dtype=np.float64).reshape(len(reference), -1))
    dists = np.sqrt(np.sum((ref - q) ** 2, axis=1))
    dists = dists[dists > 0.0]
    if dists.size < k:
        raise ValueError(f"need at least k={k} non-duplicate reference points, got {dists.size}")
    order = np.argsort(dists, kind="stable")
    r = dists[order[:k]]
    rk = r[-1]
    s = float(np.sum(np.log(r / rk)))
    if s == 0.0:
        return float("inf")
    return -k / s


def lid_batch(queries: np.ndarray, reference: np.ndarray, k: int) -> np.ndarray:
    return np.array([lid_score(q, reference, k) for q in queries])


@dataclass
class LidDetectResult:
    mean_difference: float
    balanced_accuracy: float


def _logistic_balanced_accuracy(scores, labels, seed, epochs=500, lr=0.1):
    """1-D logistic regression by gradient descent; balanced accuracy held out."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    finite = scores[np.isfinite(scores)]
    cap = 2.0 * float(np.max(np.abs(finite))) if finite.size else 1e6
    x = np.clip(np.nan_to_num(scores, posinf=cap, neginf=-cap), -cap, cap)
    mu, sd = float(x.mean()), float(x.std()) or 1.0
    x = (x - mu) / sd
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        cut = max(1, int(round(0.7 * idx.size)))
        train_idx.extend(idx[:cut])
        test_idx.extend(idx[cut:] if idx.size > cut else idx[:1])
    train_idx = np.array(train_idx)
    test_idx = np.array(test_idx)
    a, b = 0.0, 0.0
    xt, yt = x[train_idx], labels[train_idx]
    for _ in range(epochs):
        p = 1.0 / (1.0 + np.exp(-(a * xt + b)))
        err = p - yt
        a -= lr * float(np.mean(err * xt))
        b -= lr * float(np.mean(err))
    pred = (1.0 / (1.0 + np.exp(-(a * x[test_idx] + b)))) > 0.5
    truth = labels[test_idx]
    recalls = []
    for cls in (0, 1):
        m = truth == cls
        recalls.append(float(np.mean(pred[m] == cls)) if m.any() else 0.0)
    return float(np.mean(recalls))


def lid_detectability(
    normal,
    noisy,
    adversarial,
    k_values,
    batch_size: int = 100,
    seed: int = 0,
) -> dict[int, LidDetectResult]:
    """The detectability protocol: LID scores of the three groups against
    mini-batches of the normal set; normal+noisy form the negative class,
    adversarial the positive; a logistic detector is scored per k.

    Reference mini-batches grow to k+1 vectors when k exceeds batch_size.
    """
    groups = [np.asarray(g, dtype=np.float64).reshape(len(g), -1) for g in (normal, noisy, adversarial)]
    if any(len(g) == 0 for g in groups):
        raise ValueError("all three sets must be non-empty")
    normal_flat = groups[0]
    results = {}
    for k in k_values:
        size = max(batch_size, k + 1)
        n_ref_batches = max(1, int(np.ceil(len(normal_flat) / size)))

        def ref_batch(bi):
            # constant-size reference: short tail slices wrap to the start
            start = (bi % n_ref_batches) * size
            idx = (start + np.arange(min(size, len(normal_flat)))) % len(normal_flat)
            return normal_flat[idx]

        group_scores = []
        for g in groups:
            scores = []
            for bi, start in enumerate(range(0, len(g), size)):
                ref = ref_batch(bi)
                for q in g[start : start + size]:
                    scores.append(lid_score(q, ref, k))
            group_scores.append(np.array(scores))
        neg = np.concatenate([group_scores[0], group_scores[1]])
        pos = group_scores[2]
        finite = np.concatenate([neg[np.isfinite(neg)], pos[np.isfinite(pos)]])
        cap = 2.0 * float(np.max(np.abs(finite))) if finite.size else 1e6
        mean_diff = float(np.mean(np.clip(pos, -cap, cap)) - np.mean(np.clip(neg, -cap, cap)))
        scores = np.concatenate([neg, pos])
        labels = np.concatenate([np.zeros(neg.size, dtype=int), np.ones(pos.size, dtype=int)])
        acc = _logistic_balanced_accuracy(scores, labels, seed)
        results[int(k)] = LidDetectResult(mean_diff, 100.0 * acc)
    return results


# -- scalar metrics -------------------------------------------------------------


def fooling_rate(reports: list[AttackReport], model) -> float:
    """Percentage of adversarial examples the given model misclassifies,
    evaluated fresh (so reports crafted on one model can score another)."""
    if not reports:
        raise ValueError("no reports to evaluate")
    if hasattr(model, "predict_batch"):
        advs = np.stack([r.adversarial for r in reports])
        truth = np.array([r.label_before for r in reports])
        return 100.0 * float(np.mean(model.predict_batch(advs) != truth))
    wrong = sum(model.predict(r.adversarial) != r.label_before for r in reports)
    return 100.0 * wrong / len(reports)


def tradeoff_distance(error_pct: float, fooling_pct: float) -> float:
    """Euclidean distance of (error %, fooling %) from the origin."""
    if not (0.0 <= error_pct <= 100.0 and 0.0 <= fooling_pct <= 100.0):
        raise ValueError("both inputs must be percentages in [0, 100]")
    return float(np.sqrt(error_pct**2 + fooling_pct**2))


def average_rank(table: np.ndarray, higher_is_better: bool) -> np.ndarray:
    """Mean rank per row across conditions (columns); rank 1 is best, ties get
    the mean of the tied ranks."""
    table = np.atleast_2d(np.asarray(table, dtype=np.float64))
    ranks = np.empty_like(table)
    for j in range(table.shape[1]):
        col = -table[:, j] if higher_is_better else table[:, j]
        ranks[:, j] = rankdata(col, method="average")
    return ranks.mean(axis=1)


# -- k-fold harness -------------------------------------------------------------


def assign_folds(source_ids, labels, n_folds: int, seed: int) -> dict[str, int]:
    """Stratified fold assignment per source id (augmented variants follow
    their source). Retries a few seeds if some class would vanish from a
    training fold, then raises."""
    if n_folds < 2:
        raise ValueError("need at least 2 folds")
    by_source: dict[str, int] = {}
    for sid, label in zip(source_ids, labels):
        if sid in by_source and by_source[sid] != label:
            raise ValueError(f"source {sid} carries conflicting labels")
        by_source[sid] = label
    classes = sorted(set(by_source.values()))
    for attempt in range(3):
        rng = np.random.default_rng(seed + attempt)
        assignment: dict[str, int] = {}
        offset = 0
        for cls in classes:
            sources = sorted(s for s, l in by_source.items() if l == cls)
            rng.shuffle(sources)
            for i, s in enumerate(sources):
                assignment[s] = (i + offset) % n_folds
            offset += len(sources)
        ok = all(
            any(assignment[s] != f for s, l in by_source.items() if l == cls)
            for cls in classes
            for f in range(n_folds)
        )
        if ok:
            return assignment
    raise ValueError("stratification failed: some class cannot appear in every training fold")


@dataclass
class EvalReport:
    model_names: list[str]
    accuracy: dict[str, float]
    fooling: dict[str, dict[str, float]]
    tradeoff: dict[str, tuple[float, float, float]] = field(default_factory=dict)
    accuracy_rank: dict[str, float] = field(default_factory=dict)
    fooling_rank: dict[str, float] = field(default_factory=dict)

    def finalize(self) -> "EvalReport":
        """Fill the tradeoff (mean fooling over attacks, unweighted) and ranks."""
        for name in self.model_names:
            atk = self.fooling.get(name, {})
            mean_fool = float(np.mean(list(atk.values()))) if atk else 0.0
            err = 100.0 - self.accuracy[name]
            self.tradeoff[name] = (err, mean_fool, tradeoff_distance(err, mean_fool))
        acc_table = np.array([[self.accuracy[n]] for n in self.model_names])
        self.accuracy_rank = dict(zip(self.model_names, average_rank(acc_table, True)))
        attacks = sorted({a for d in self.fooling.values() for a in d})
        if attacks:
            fool_table = np.array(
                [[self.fooling[n][a] for a in attacks] for n in self.model_names]
            )
            self.fooling_rank = dict(zip(self.model_names, average_rank(fool_table, False)))
        return self


def kfold_evaluate(
    cfg: PipelineConfig,
    clips: list[AudioClip],
    folds: int | None = None,
    seed: int | None = None,
    dataset: ImageDataset | None = None,
) -> EvalReport:
    """Cross-validated accuracy and per-attack fooling, averaged over folds.

    Folds partition by source id; `dataset` may carry prebuilt images for the
    same clips to skip the spectrogram stage.
    """
    folds = cfg.eval.folds if folds is None else folds
    seed = cfg.eval.seed if seed is None else seed
    if dataset is None:
        dataset = build_image_dataset(clips, cfg)
    n_classes = int(dataset.labels.max()) + 1
    assignment = assign_folds(dataset.source_ids, dataset.labels, folds, seed)
    fold_of = np.array([assignment[s] for s in dataset.source_ids])
    acc_sums: dict[str, list[float]] = {}
    fool_sums: dict[str, dict[str, list[float]]] = {}
    for f in range(folds):
        train_ds = dataset.subset(fold_of != f)
        test_ds = dataset.subset(fold_of == f)
        result = run_fold(cfg, train_ds, test_ds, n_classes, seed=seed + f)
        for name, acc in result.accuracy.items():
            acc_sums.setdefault(name, []).append(acc)
        for name, per_attack in result.fooling.items():
            for attack, rate in per_attack.items():
                fool_sums.setdefault(name, {}).setdefault(attack, []).append(rate)
    names = sorted(acc_sums)
    report = EvalReport(
        model_names=names,
        accuracy={n: float(np.mean(acc_sums[n])) for n in names},
        fooling={
            n: {a: float(np.mean(v)) for a, v in sorted(fool_sums.get(n, {}).items())} for n in names
        },
    )
    return report.finalize()


ABLATION_TOGGLES = ("mag_scales", "color_comp", "highboost", "svd", "cda")


def toggled_config(cfg: PipelineConfig, toggle: str) -> PipelineConfig:
    cfg = replace(cfg)
    if toggle == "mag_scales":
        cfg.spectra = replace(cfg.spectra, mag_scales=[cfg.spectra.mag_scales[0]])
    elif toggle == "color_comp":
        cfg.imaging = replace(cfg.imaging, color_comp=False)
    elif toggle == "highboost":
        cfg.imaging = replace(cfg.imaging, highboost_c=0.0)
    elif toggle == "svd":
        cfg.imaging = replace(cfg.imaging, svd=False)
    elif toggle == "cda":
        cfg.neural = replace(cfg.neural, cda=False)
    else:
        raise ValueError(f"unknown ablation toggle {toggle!r}; choose from {ABLATION_TOGGLES}")
    return cfg


def ablation(
    cfg: PipelineConfig,
    toggles,
    clips: list[AudioClip],
    folds: int | None = None,
    seed: int | None = None,
) -> dict[str, dict[str, float]]:
    """Signed effect of removing each module on the proposed model: deltas of
    accuracy and of robustness (100 - fooling) split by attack family, each
    computed as value-without minus value-with."""
    baseline = kfold_evaluate(cfg, clips, folds=folds, seed=seed)
    out = {}
    for toggle in toggles:
        report = kfold_evaluate(toggled_config(cfg, toggle), clips, folds=folds, seed=seed)
        out[toggle] = _proposed_deltas(baseline, report)
    return out


def _family_fooling(report: EvalReport, model: str, deep: bool) -> float:
    fam = ("fgsm", "bim_a", "bim_b", "cwa") if deep else ("evasion", "lfa")
    vals = [v for a, v in report.fooling.get(model, {}).items() if a in fam]
    return float(np.mean(vals)) if vals else 0.0


def _proposed_deltas(base: EvalReport, removed: EvalReport) -> dict[str, float]:
    name = "proposed"
    return {
        "accuracy": removed.accuracy[name] - base.accuracy[name],
        "robust_svm": (100.0 - _family_fooling(removed, name, False))
        - (100.0 - _family_fooling(base, name, False)),
        "robust_deep": (100.0 - _family_fooling(removed, name, True))
        - (100.0 - _family_fooling(base, name, True)),
    }


# -- report artifacts -----------------------------------------------------------


def write_eval_tables(report: EvalReport, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    acc_path = out_dir / "accuracy.csv"
    with open(acc_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "mean_accuracy_pct"])
        for name in report.model_names:
            w.writerow([name, f"{report.accuracy[name]:.6f}"])
    paths.append(acc_path)

    fool_path = out_dir / "fooling.csv"
    attacks = sorted({a for d in report.fooling.values() for a in d})
    with open(fool_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["attack"] + report.model_names)
        for a in attacks:
            w.writerow([a] + [f"{report.fooling[n].get(a, float('nan')):.6f}" for n in report.model_names])
    paths.append(fool_path)

    trade_path = out_dir / "tradeoff.csv"
    with open(trade_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "error_pct", "mean_fooling_pct", "distance"])
        for name in report.model_names:
            err, fool, dist = report.tradeoff[name]
            w.writerow([name, f"{err:.6f}", f"{fool:.6f}", f"{dist:.6f}"])
    paths.append(trade_path)

    rank_path = out_dir / "ranks.csv"
    with open(rank_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "accuracy_rank", "fooling_rank"])
        for name in report.model_names:
            w.writerow(
                [
                    name,
                    f"{report.accuracy_rank.get(name, float('nan')):.6f}",
                    f"{report.fooling_rank.get(name, float('nan')):.6f}",
                ]
            )
    paths.append(rank_path)
    return paths


def write_lid_table(results: dict[int, LidDetectResult], representation: str, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["representation", "k", "mean_lid_difference", "balanced_accuracy_pct"])
        for k in sorted(results):
            r = results[k]
            w.writerow([representation, k, f"{r.mean_difference:.6f}", f"{r.balanced_accuracy:.6f}"])


def write_ablation_table(deltas: dict[str, dict[str, float]], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["module", "delta_accuracy", "delta_robust_svm_attacks", "delta_robust_deep_attacks"])
        for toggle in deltas:
            d = deltas[toggle]
            w.writerow(
                [toggle, f"{d['accuracy']:+.6f}", f"{d['robust_svm']:+.6f}", f"{d['robust_deep']:+.6f}"]
            )


def write_tradeoff_svg(report: EvalReport, path: str | Path, size: int = 480) -> None:
    """Error-vs-fooling scatter with per-model distance annotations."""
    pad = 50
    span = size - 2 * pad

    def sx(v):
        return pad + span * v / 100.0

    def sy(v):
        return size - pad - span * v / 100.0

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{size - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{size - pad}" stroke="black"/>',
        f'<text x="{size // 2}" y="{size - 12}" text-anchor="middle" font-size="12">mean error (%)</text>',
        f'<text x="14" y="{size // 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {size // 2})">mean fooling rate (%)</text>',
    ]
    for tick in (0, 25, 50, 75, 100):
        lines.append(
            f'<text x="{sx(tick):.1f}" y="{size - pad + 16}" text-anchor="middle" font-size="9">{tick}</text>'
        )
        lines.append(
            f'<text x="{pad - 8}" y="{sy(tick) + 3:.1f}" text-anchor="end" font-size="9">{tick}</text>'
        )
    colors = ("#c0392b", "#2980b9", "#27ae60", "#8e44ad", "#d68910")
    for i, name in enumerate(report.model_names):
        err, fool, dist = report.tradeoff[name]
        color = colors[i % len(colors)]
        lines.append(f'<circle cx="{sx(err):.2f}" cy="{sy(fool):.2f}" r="5" fill="{color}"/>')
        lines.append(
            f'<text x="{sx(err) + 8:.2f}" y="{sy(fool) - 6:.2f}" font-size="11" fill="{color}">'
            f"{name} (d = {dist:.2f})</text>"
        )
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
