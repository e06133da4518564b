"""Dataset ingestion, splits, pair/triplet sampling and synthetic data.

Directory layout: ``root/normal/*`` and ``root/potholes/*`` holding
PNG/PPM/PGM files. Pairs are unordered and canonicalized as
(min(id), max(id)); all sampling is uniform without replacement and
deterministic given a seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imaging

CLASS_DIRS = ("normal", "potholes")
IMAGE_SUFFIXES = (".png", ".ppm", ".pgm")


class LayoutError(ValueError):
    """Dataset directory does not follow the expected layout."""


class BudgetError(ValueError):
    """More pairs requested than combinatorially possible."""


class StructureError(ValueError):
    """Class structure cannot support the requested sampling."""


@dataclass(frozen=True)
class LabeledSample:
    id: str
    label: str  # "normal" | "pothole"
    source: str


@dataclass
class DatasetSplit:
    train: list[LabeledSample]
    validation: list[LabeledSample]
    test: list[LabeledSample]
    seed: int


@dataclass(frozen=True)
class LabeledPair:
    a: str
    b: str
    label: int  # 1 = same class, 0 = different


@dataclass(frozen=True)
class Triplet:
    anchor: str
    positive: str
    negative: str


@dataclass
class PairBudget:
    genuine_possible: int
    imposter_possible: int
    genuine_requested: int
    imposter_requested: int
    uvp_genuine: int
    uvp_imposter: int


# -- ingestion ---------------------------------------------------------


def load_dataset_directory(root) -> tuple[list[LabeledSample], list[str]]:
    """Enumerate samples under root/normal and root/potholes.

    Returns (samples, errors); undecodable files are reported but do
    not abort the scan.
    """
    root = Path(root)
    samples: list[LabeledSample] = []
    errors: list[str] = []
    for class_dir in CLASS_DIRS:
        d = root / class_dir
        if not d.is_dir():
            raise LayoutError(f"missing class directory {d}")
        label = "normal" if class_dir == "normal" else "pothole"
        files = sorted(
            p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
        )
        for p in files:
            try:
                imaging.decode_image(p.read_bytes())
            except imaging.DecodeError as e:
                errors.append(f"{p}: {e}")
                continue
            rel = str(p.relative_to(root))
            samples.append(LabeledSample(id=rel, label=label, source=str(p)))
    return samples, errors


def group_by_class(samples) -> dict[str, list[LabeledSample]]:
    groups: dict[str, list[LabeledSample]] = {}
    for s in samples:
        groups.setdefault(s.label, []).append(s)
    return groups


def split_dataset(
    samples,
    train_per_class: int,
    test_counts: dict[str, int],
    val_fraction: float,
    seed: int,
) -> DatasetSplit:
    """Seeded per-class shuffle then partition into train/val/test.

    ``train_per_class`` samples go to train+validation (with
    ``val_fraction`` of them carved out for validation) and
    ``test_counts[label]`` to test.
    """
    groups = group_by_class(samples)
    train, val, test = [], [], []
    rng = np.random.default_rng(seed)
    for label in sorted(groups):
        pool = sorted(groups[label], key=lambda s: s.id)
        want = train_per_class + test_counts.get(label, 0)
        if want > len(pool):
            raise StructureError(
                f"class {label!r} has {len(pool)} samples, "
                f"{want} requested (short by {want - len(pool)})"
            )
        order = rng.permutation(len(pool))
        chosen = [pool[i] for i in order]
        n_val = int(round(train_per_class * val_fraction))
        train += chosen[: train_per_class - n_val]
        val += chosen[train_per_class - n_val : train_per_class]
        test += chosen[train_per_class : train_per_class + test_counts.get(label, 0)]
    return DatasetSplit(train=train, validation=val, test=test, seed=seed)


# -- pair and triplet sampling -----------------------------------------


def _canonical(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a < b else (b, a)


def _all_same_pairs(groups):
    pairs = []
    for label in sorted(groups):
        ids = sorted(s.id for s in groups[label])
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                pairs.append(LabeledPair(*_canonical(ids[i], ids[j]), label=1))
    return pairs

def _all_diff_pairs(groups):
    labels = sorted(groups)
    pairs = []
    for i, la in enumerate(labels):
        for lb in labels[i + 1 :]:
            for sa in groups[la]:
                for sb in groups[lb]:
                    pairs.append(LabeledPair(*_canonical(sa.id, sb.id), label=0))
    return pairs


def _sample_pairs(pool, count, seed, kind):
    if count > len(pool):
        raise BudgetError(
            f"{count} {kind} pairs requested but only {len(pool)} are possible"
        )
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(pool))[:count]
    return [pool[i] for i in sorted(idx)]


def gen_same_pairs(groups, count: int, seed: int) -> list[LabeledPair]:
    """Uniform sample without replacement of within-class pairs (label 1)."""
    return _sample_pairs(_all_same_pairs(groups), count, seed, "genuine")


def gen_diff_pairs(groups, count: int, seed: int) -> list[LabeledPair]:
    """Uniform sample without replacement of cross-class pairs (label 0)."""
    return _sample_pairs(_all_diff_pairs(groups), count, seed, "imposter")


def max_distinct_triplets(groups) -> int:
    """Number of distinct (anchor, positive, negative) triples."""
    sizes = {l: len(g) for l, g in groups.items()}
    total = sum(sizes.values())
    return sum(n * (n - 1) * (total - n) for n in sizes.values())


def sample_triplets(groups, count: int, seed: int) -> list[Triplet]:
    """(anchor, positive, negative) triples, distinct, uniform given seed."""
    labels = sorted(groups)
    eligible = [l for l in labels if len(groups[l]) >= 2 and any(
        groups[o] for o in labels if o != l
    )]
    if not eligible:
        raise StructureError(
            "triplet sampling needs a class with >= 2 members plus a nonempty other class"
        )
    total = max_distinct_triplets(groups)
    if count > total:
        raise StructureError(f"{count} triplets requested, only {total} distinct exist")
    rng = np.random.default_rng(seed)
    if count * 2 >= total:
        # near saturation rejection sampling stalls; enumerate instead
        labels_all = sorted(groups)
        every = [
            Triplet(a.id, p.id, n.id)
            for l in labels_all
            for a in groups[l]
            for p in groups[l]
            if p.id != a.id
            for ol in labels_all
            if ol != l
            for n in groups[ol]
        ]
        idx = rng.permutation(total)[:count]
        return [every[i] for i in sorted(idx)]
    anchors = [s for l in eligible for s in groups[l]]
    out: list[Triplet] = []
    seen = set()
    attempts = 0
    cap = 100 * max(count, 1)
    while len(out) < count:
        if attempts >= cap:
            raise StructureError(
                f"triplet sampling saturated after {cap} attempts "
                f"({len(out)}/{count} found)"
            )
        attempts += 1
        a = anchors[rng.integers(len(anchors))]
        positives = [s for s in groups[a.label] if s.id != a.id]
        p = positives[rng.integers(len(positives))]
        negatives = [s for l in labels if l != a.label for s in groups[l]]
        n = negatives[rng.integers(len(negatives))]
        trip = Triplet(a.id, p.id, n.id)
        if trip in seen:
            continue
        seen.add(trip)
        out.append(trip)
    return out


def pair_budget(
    class_sizes: dict[str, int],
    genuine_requested: int = 0,
    imposter_requested: int = 0,
    uvp_inputs: tuple[int, int, int] | None = None,
) -> PairBudget:
    """Combinatorial pair counts plus the UVP-style accounting.

    uvp_inputs = (train count U, validation count V, class count P);
    uvp_genuine = U*V*P and uvp_imposter = (U*V*P)^2 - U*V*P.
    """
    sizes = list(class_sizes.values())
    genuine = sum(math.comb(n, 2) for n in sizes)
    imposter = sum(
        sizes[i] * sizes[j] for i in range(len(sizes)) for j in range(i + 1, len(sizes))
    )
    if genuine_requested > genuine:
        raise BudgetError(
            f"{genuine_requested} genuine pairs requested, only {genuine} possible"
        )
    if imposter_requested > imposter:
        raise BudgetError(
            f"{imposter_requested} imposter pairs requested, only {imposter} possible"
        )
    uvp = 0
    if uvp_inputs is not None:
        u, v, p = uvp_inputs
        uvp = u * v * p
    return PairBudget(
        genuine_possible=genuine,
        imposter_possible=imposter,
        genuine_requested=genuine_requested,
        imposter_requested=imposter_requested,
        uvp_genuine=uvp,
        uvp_imposter=uvp * uvp - uvp,
    )


def export_pairs_csv(pairs, path) -> None:
    with open(path, "w") as fh:
        fh.write("a,b,label\n")
        for p in pairs:
            fh.write(f"{p.a},{p.b},{p.label}\n")


# -- synthetic road textures -------------------------------------------


def _value_noise(rng, side, octaves=4, base=8):
    """Multi-octave value noise in [0,1] via bilinear-upsampled grids."""
    acc = np.zeros((side, side))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = min(side, base * (2**o))
        grid = rng.random((cells, cells))
        buf = imaging.ImageBuffer(cells, cells, 1, grid[:, :, None])
        up = imaging.resize_bilinear(buf, side, side).pixels[:, :, 0]
        acc += amp * up
        total += amp
        amp *= 0.5
    return acc / total


def _pothole_mask(rng, side):
    """Rotated-ellipse mask with randomized center and axes."""
    cy = rng.uniform(0.3, 0.7) * side
    cx = rng.uniform(0.3, 0.7) * side
    ry = rng.uniform(0.12, 0.28) * side
    rx = rng.uniform(0.12, 0.28) * side
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:side, 0:side]
    y = yy - cy
    x = xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = (x * ct + y * st) / rx
    v = (-x * st + y * ct) / ry
    r2 = u * u + v * v
    return r2  # <1 inside the ellipse


def synth_image(rng: np.random.Generator, side: int, pothole: bool):
    """One synthetic road texture; returns (ImageBuffer, mask or None)."""
    base = rng.uniform(0.45, 0.65)
    tex = base + 0.25 * (_value_noise(rng, side) - 0.5)
    if rng.random() < 0.3:
        # faint lane streak
        col = int(rng.uniform(0.2, 0.8) * side)
        width = max(1, side // 24)
        tex[:, col : col + width] = np.clip(
            tex[:, col : col + width] + rng.uniform(0.15, 0.3), 0, 1
        )
    mask = None
    if pothole:
        r2 = _pothole_mask(rng, side)
        mask = r2 < 1.0
        darken = rng.uniform(0.4, 0.7)
        rim = np.clip((1.2 - r2) / 0.2, 0.0, 1.0)  # soft edge outside r2=1
        tex = tex * (1.0 - darken * np.clip(rim, 0, 1))
    tex = np.clip(tex, 0.0, 1.0)
    rgb = np.stack([tex, tex * rng.uniform(0.96, 1.0), tex * rng.uniform(0.92, 0.98)], axis=-1)
    img = imaging.ImageBuffer(side, side, 3, np.clip(rgb, 0, 1))
    return img, mask


def gen_synthetic_dataset(per_class: int, side: int, seed: int, out_root) -> list[Path]:
    """Write per_class normal and pothole PNGs under out_root."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if side < 32:
        raise ValueError("side must be >= 32")
    out_root = Path(out_root)
    written = []
    for class_dir, pothole in (("normal", False), ("potholes", True)):
        d = out_root / class_dir
        d.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            rng = np.random.default_rng((seed, 0 if not pothole else 1, i))
            img, _ = synth_image(rng, side, pothole)
            path = d / f"{class_dir[:-1] if pothole else class_dir}_{i:04d}.png"
            imaging.write_png(img, path)
            written.append(path)
    return written
