"""Verification metrics: threshold sweep, EER, AUROC, AUPR and reports.

Scores are always similarity-oriented (higher = more alike); models
that natively produce distances contribute score = -distance. All
metric arithmetic runs in float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import network
from .tensor import Tensor


class DegeneracyError(ValueError):
    """A score list is empty where metrics need both populations."""


class ReferenceError_(KeyError):
    """A pair references a sample id that does not exist."""


class GalleryError(ValueError):
    """A gallery class has no references."""


@dataclass
class ScoreSet:
    genuine: np.ndarray  # same-class pair scores
    imposter: np.ndarray  # different-class pair scores

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).reshape(-1)
        self.imposter = np.asarray(self.imposter, dtype=np.float64).reshape(-1)

    def check(self):
        if self.genuine.size == 0 or self.imposter.size == 0:
            raise DegeneracyError(
                f"metrics need both populations (|genuine|={self.genuine.size}, "
                f"|imposter|={self.imposter.size})"
            )
        if not (np.all(np.isfinite(self.genuine)) and np.all(np.isfinite(self.imposter))):
            raise DegeneracyError("scores must be finite")


@dataclass
class MetricsReport:
    eer: float
    eer_threshold: float
    auroc: float
    aupr: float
    threshold_used: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    counts: dict  # tp, fp, tn, fn
    n_genuine: int
    n_imposter: int
    degenerate: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


# -- scoring -----------------------------------------------------------


def similarity_scores(model: network.SiameseModel, emb_a, emb_b) -> np.ndarray:
    """Probability scores for rows of embeddings (float64 sigmoid, unclamped)."""
    logit = (
        np.abs(emb_a - emb_b) @ model.sim_w.data.astype(np.float64)
        + model.sim_b.data.astype(np.float64)[0]
    )
    return 1.0 / (1.0 + np.exp(-logit))


def embed_samples(model: network.SiameseModel, ids, images, batch=64) -> dict:
    """Eval-mode embeddings for a list of sample ids."""
    out = {}
    ids = list(ids)
    for bi in range(0, len(ids), batch):
        chunk = ids[bi : bi + batch]
        arrs = np.stack([images[i] for i in chunk])
        emb = network.forward(model.embed, Tensor(arrs), mode="eval")
        for cid, vec in zip(chunk, emb.data.astype(np.float64)):
            out[cid] = vec
    return out


def score_pairs(
    model: network.SiameseModel,
    pairs,
    images: dict,
    score_mode: str = "probability",
) -> ScoreSet:
    """Score labeled pairs; similarity to genuine, dissimilarity to imposter.

    score_mode "probability" uses the fitted similarity layer;
    "distance" uses -euclidean distance between embeddings.
    """
    missing = [i for p in pairs for i in (p.a, p.b) if i not in images]
    if missing:
        raise ReferenceError_(f"pairs reference unknown sample ids {missing[:5]}")
    emb = embed_samples(model, {i for p in pairs for i in (p.a, p.b)}, images)
    ea = np.stack([emb[p.a] for p in pairs])
    eb = np.stack([emb[p.b] for p in pairs])
    if score_mode == "probability":
        scores = similarity_scores(model, ea, eb)
    elif score_mode == "distance":
        scores = -np.sqrt(((ea - eb) ** 2).sum(axis=1))
    else:
        raise ValueError(f"unknown score mode {score_mode!r}")
    labels = np.array([p.label for p in pairs])
    return ScoreSet(genuine=scores[labels == 1], imposter=scores[labels == 0])


# -- threshold sweep ---------------------------------------------------


def far_frr(scores: ScoreSet, threshold: float) -> tuple[float, float]:
    """FAR = imposters accepted (score >= T); FRR = genuines rejected."""
    scores.check()
    far = float(np.mean(scores.imposter >= threshold))
    frr = float(np.mean(scores.genuine < threshold))
    return far, frr


def _candidate_thresholds(scores: ScoreSet) -> np.ndarray:
    s = np.unique(np.concatenate([scores.genuine, scores.imposter]))
    mids = (s[:-1] + s[1:]) / 2.0
    lo = s[0] - 1.0
    hi = s[-1] + 1.0
    return np.unique(np.concatenate([[lo], s, mids, [hi]]))


def compute_eer(scores: ScoreSet) -> tuple[float, float]:
    """Sweep distinct scores plus midpoints; minimize |FAR-FRR|.

    Returns (eer, threshold) with eer = (FAR+FRR)/2 at the minimizing
    point; ties resolve to the lowest threshold.
    """
    scores.check()
    ts = _candidate_thresholds(scores)
    far = (scores.imposter[None, :] >= ts[:, None]).mean(axis=1)
    frr = (scores.genuine[None, :] < ts[:, None]).mean(axis=1)
    gap = np.abs(far - frr)
    i = int(np.argmin(gap))  # first minimum = lowest threshold
    return float((far[i] + frr[i]) / 2.0), float(ts[i])


def compute_auroc(scores: ScoreSet) -> float:
    """Trapezoidal area under the swept ROC (ties grouped).

    Equals the Mann-Whitney statistic
    (sum [g > i] + 0.5 [g == i]) / (|G| |I|).
    """
    scores.check()
    ts = np.unique(np.concatenate([scores.genuine, scores.imposter]))[::-1]
    tpr = np.concatenate([[0.0], (scores.genuine[None, :] >= ts[:, None]).mean(axis=1)])
    fpr = np.concatenate([[0.0], (scores.imposter[None, :] >= ts[:, None]).mean(axis=1)])
    return float((np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0).sum())


def compute_aupr(scores: ScoreSet) -> float:
    """Average precision over descending-score prefixes, ties grouped."""
    scores.check()
    ts = np.unique(np.concatenate([scores.genuine, scores.imposter]))[::-1]
    tp = (scores.genuine[None, :] >= ts[:, None]).sum(axis=1).astype(np.float64)
    fp = (scores.imposter[None, :] >= ts[:, None]).sum(axis=1).astype(np.float64)
    recall = tp / scores.genuine.size
    precision = tp / np.maximum(tp + fp, 1.0)
    prev_r = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_r) * precision).sum())


def classify_report(scores: ScoreSet, threshold: float) -> dict:
    """Confusion metrics at one operating point (positive = score >= T)."""
    scores.check()
    tp = int(np.sum(scores.genuine >= threshold))
    fn = int(scores.genuine.size - tp)
    fp = int(np.sum(scores.imposter >= threshold))
    tn = int(scores.imposter.size - fp)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (
        2 * precision * recall / (precision + recall) if precision + recall else 0.0
    )
    return {
        "accuracy": (tp + tn) / (tp + fp + tn + fn),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "counts": {"tp": tp, "fp": fp, "tn": tn, "fn": fn},
        "flagged_zero_division": (tp + fp == 0) or (tp + fn == 0),
    }


# -- image classification ----------------------------------------------


def classify_image(
    model: network.SiameseModel,
    gallery: dict,
    image: np.ndarray,
    threshold: float | None = None,
) -> tuple[str, dict]:
    """Label an image by mean similarity against per-class galleries.

    ``gallery`` maps label -> list of reference embeddings. Exact ties
    resolve to "normal".
    """
    for label, refs in gallery.items():
        if len(refs) == 0:
            raise GalleryError(f"gallery class {label!r} is empty")
    emb = network.forward(model.embed, Tensor(image[None]), mode="eval").data[0]
    emb = emb.astype(np.float64)
    evidence = {}
    for label, refs in gallery.items():
        refs = np.stack(refs)
        sims = similarity_scores(model, np.broadcast_to(emb, refs.shape), refs)
        evidence[label] = float(sims.mean())
    best = max(sorted(evidence), key=lambda l: (evidence[l], l == "normal"))
    return best, evidence


# -- full report and curves --------------------------------------------


def build_score_set(model, samples, images, score_mode="probability") -> ScoreSet:
    """Embed test samples once and score every unordered test pair."""
    from . import data as D

    groups = D.group_by_class(samples)
    pairs = D._all_same_pairs(groups) + D._all_diff_pairs(groups)
    return score_pairs(model, pairs, images, score_mode=score_mode)


def full_report(scores: ScoreSet, threshold: float | None = None):
    """All metrics at the EER threshold (or an explicit one) plus curves.

    Returns (MetricsReport, roc_rows, pr_rows) where the curve rows are
    (threshold, x, y) tuples ready for CSV emission.
    """
    scores.check()
    degenerate = (
        np.unique(np.concatenate([scores.genuine, scores.imposter])).size == 1
    )
    eer, eer_t = compute_eer(scores)
    auroc = compute_auroc(scores)
    aupr = compute_aupr(scores)
    used = eer_t if threshold is None else threshold
    cls = classify_report(scores, used)
    report = MetricsReport(
        eer=eer,
        eer_threshold=eer_t,
        auroc=auroc,
        aupr=aupr,
        threshold_used=used,
        accuracy=cls["accuracy"],
        precision=cls["precision"],
        recall=cls["recall"],
        f1=cls["f1"],
        counts=cls["counts"],
        n_genuine=int(scores.genuine.size),
        n_imposter=int(scores.imposter.size),
        degenerate=degenerate,
    )
    ts = _candidate_thresholds(scores)
    roc_rows = []
    pr_rows = []
    for t in ts:
        far, frr = far_frr(scores, t)
        roc_rows.append((float(t), far, 1.0 - frr))
        c = classify_report(scores, float(t))
        pr_rows.append((float(t), c["precision"], c["recall"]))
    return report, roc_rows, pr_rows


def write_curves(roc_rows, pr_rows, prefix) -> tuple[str, str]:
    roc_path = f"{prefix}_roc.csv"
    pr_path = f"{prefix}_pr.csv"
    with open(roc_path, "w") as fh:
        fh.write("threshold,far,tpr\n")
        for t, far, tpr in roc_rows:
            fh.write(f"{t:.10g},{far:.10g},{tpr:.10g}\n")
    with open(pr_path, "w") as fh:
        fh.write("threshold,precision,recall\n")
        for t, p, r in pr_rows:
            fh.write(f"{t:.10g},{p:.10g},{r:.10g}\n")
    return roc_path, pr_path


def render_curves_svg(report: MetricsReport, roc_rows, pr_rows, path) -> None:
    """Minimal two-panel SVG: ROC with the EER point, and the PR curve."""
    w, h, pad = 360, 320, 45

    def panel(x0, rows, xi, yi, title, xlab, ylab, marker=None):
        pts = sorted((r[xi], r[yi]) for r in rows)
        poly = " ".join(
            f"{x0 + pad + x * (w - 2 * pad):.1f},{h - pad - y * (h - 2 * pad):.1f}"
            for x, y in pts
        )
        parts = [
            f'<rect x="{x0 + pad}" y="{pad}" width="{w - 2 * pad}" '
            f'height="{h - 2 * pad}" fill="none" stroke="#999"/>',
            f'<polyline points="{poly}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>',
            f'<text x="{x0 + w / 2}" y="20" text-anchor="middle" font-size="13">{title}</text>',
            f'<text x="{x0 + w / 2}" y="{h - 8}" text-anchor="middle" font-size="11">{xlab}</text>',
            f'<text x="{x0 + 12}" y="{h / 2}" font-size="11" '
            f'transform="rotate(-90 {x0 + 12} {h / 2})" text-anchor="middle">{ylab}</text>',
        ]
        if marker:
            mx, my = marker
            parts.append(
                f'<circle cx="{x0 + pad + mx * (w - 2 * pad):.1f}" '
                f'cy="{h - pad - my * (h - 2 * pad):.1f}" r="4" fill="#d62728"/>'
            )
        return "\n".join(parts)

    eer_far, eer_frr = None, None
    for t, far, tpr in roc_rows:
        if t == report.eer_threshold:
            eer_far, eer_frr = far, tpr
    svg = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * w}" height="{h}">',
        panel(
            0, roc_rows, 1, 2,
            f"ROC (AUROC={report.auroc:.3f}, EER={report.eer:.3%})",
            "FAR", "TPR",
            marker=(eer_far, eer_frr) if eer_far is not None else None,
        ),
        panel(w, pr_rows, 2, 1, f"PR (AUPR={report.aupr:.3f})", "Recall", "Precision"),
        "</svg>",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(svg))
