"""Independent oracles runnable as a user-facing audit.

Four suites: central finite differences against every layer's analytic
gradient, an exhaustive 255-candidate Otsu sweep, O(n^2) metric
recomputation, and brute-force pair enumeration. The CLI ``verify``
command and the test suite both call these.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data as D
from . import evaluation as E
from . import imaging
from . import tensor as T
from . import training
from .tensor import Tensor

FD_STEP = 1e-3
FD_RTOL = 1e-4
FD_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


# -- finite differences ------------------------------------------------


def finite_difference_grad(f, t: Tensor, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar-valued f with respect to t (in place)."""
    g = np.zeros_like(t.data)
    flat = t.data.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def gradient_error(build_loss, tensors, perturb: float = 0.0) -> float:
    """Max relative error between analytic and numeric grads.

    ``build_loss`` constructs a fresh scalar loss tensor from the
    current tensor values. ``perturb`` shifts the analytic gradient (a
    fault-injection hook for audits of the audit).
    """
    for t in tensors:
        t.zero_grad()
    build_loss().backward()
    worst = 0.0
    for t in tensors:
        ana = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        ana = ana + perturb
        num = finite_difference_grad(lambda: float(build_loss().data), t)
        err = np.abs(ana - num) / np.maximum(np.abs(num), FD_FLOOR)
        worst = max(worst, float(err.max()))
    return worst


def _away_from(rng, shape, avoid=0.0, gap=0.05, scale=1.0):
    """Random floats kept at least ``gap`` away from a kink location."""
    x = rng.normal(scale=scale, size=shape)
    x = np.where(np.abs(x - avoid) < gap, x + np.sign(x - avoid + 1e-12) * 2 * gap, x)
    return x


def _layer_cases(rng):
    """Name -> (build_loss, tensors) factories over random small instances."""

    def mk(arr):
        return Tensor(arr, requires_grad=True, dtype=np.float64)

    def conv_case():
        x = mk(rng.normal(size=(1, 2, 4, 4)))
        w = mk(rng.normal(size=(2, 2, 3, 3)) * 0.5)
        b = mk(rng.normal(size=2))
        s = int(rng.integers(1, 3))
        p = int(rng.integers(0, 2))
        return lambda: T.tsum(T.square(T.conv2d(x, w, b, s, p))), [x, w, b]

    def maxpool_case():
        # separate values within each pooling window so the argmax does
        # not switch inside the finite-difference step
        while True:
            x = rng.normal(size=(1, 2, 4, 4))
            wins = x.reshape(1, 2, 2, 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
            d = np.abs(wins[:, :, None] - wins[:, None, :])
            np.einsum("kii->ki", d)[...] = 1.0
            if d.min() > 0.02:
                break
        xt = mk(x)
        return lambda: T.tsum(T.square(T.maxpool2d(xt, 2, 2))), [xt]

    def batchnorm_case():
        x = mk(rng.normal(size=(4, 2, 2, 2)))
        g = mk(rng.normal(size=2))
        bt = mk(rng.normal(size=2))
        st = T.BatchNormState()
        return lambda: T.tsum(T.square(T.batchnorm2d(x, g, bt, st, "train"))), [x, g, bt]

    def batchnorm_eval_case():
        x = mk(rng.normal(size=(2, 2, 2, 2)))
        g = mk(rng.normal(size=2))
        bt = mk(rng.normal(size=2))
        st = T.BatchNormState(
            running_mean=rng.normal(size=2), running_var=rng.random(2) + 0.5
        )
        return lambda: T.tsum(T.square(T.batchnorm2d(x, g, bt, st, "eval"))), [x, g, bt]

    def dense_case():
        x = mk(rng.normal(size=(3, 4)))
        w = mk(rng.normal(size=(4, 2)))
        b = mk(rng.normal(size=2))
        return lambda: T.tsum(T.square(T.dense(x, w, b))), [x, w, b]

    def relu_case():
        x = mk(_away_from(rng, (3, 5)))
        return lambda: T.tsum(T.square(T.relu(x))), [x]

    def sigmoid_case():
        x = mk(rng.normal(size=(3, 5)))
        return lambda: T.tsum(T.square(T.sigmoid(x))), [x]

    def gap_case():
        x = mk(rng.normal(size=(2, 3, 3, 3)))
        return lambda: T.tsum(T.square(T.global_avg_pool(x))), [x]

    def flatten_case():
        x = mk(rng.normal(size=(2, 2, 3)))
        w = mk(rng.normal(size=(6, 2)))
        b = mk(rng.normal(size=2))
        return lambda: T.tsum(T.square(T.dense(T.flatten(x), w, b))), [x, w, b]

    def dropout_case():
        x = mk(rng.normal(size=(4, 4)))
        seed = int(rng.integers(1 << 30))
        return (
            lambda: T.tsum(
                T.square(T.dropout(x, 0.4, "train", np.random.default_rng(seed)))
            ),
            [x],
        )

    def euclid_case():
        a = mk(rng.normal(size=(3, 4)))
        b = mk(rng.normal(size=(3, 4)))
        return lambda: T.tsum(T.euclidean_distance(a, b)), [a, b]

    def contrastive_case():
        # keep distances away from the hinge at d = margin and from d = 0
        # so central differences stay on one branch
        while True:
            a = rng.normal(size=(4, 3))
            b = rng.normal(size=(4, 3))
            d = np.sqrt(((a - b) ** 2).sum(axis=1))
            if np.all(np.abs(d - 1.0) > 0.02) and np.all(d > 0.05):
                break
        at, bt = mk(a), mk(b)
        y = (rng.random(4) < 0.5).astype(float)
        return (
            lambda: training.contrastive_loss(y, T.euclidean_distance(at, bt), 1.0),
            [at, bt],
        )

    def triplet_case():
        while True:
            a = rng.normal(size=(4, 3))
            p = rng.normal(size=(4, 3))
            n = rng.normal(size=(4, 3)) * 2
            d_ap = np.sqrt(((a - p) ** 2).sum(axis=1))
            d_an = np.sqrt(((a - n) ** 2).sum(axis=1))
            gap = d_ap - d_an + 1.0
            if (
                np.all(np.abs(gap) > 0.02)
                and np.all(d_ap > 0.05)
                and np.all(d_an > 0.05)
            ):
                break
        at, pt, nt = mk(a), mk(p), mk(n)
        return (
            lambda: training.triplet_loss(
                T.euclidean_distance(at, pt), T.euclidean_distance(at, nt), 1.0
            ),
            [at, pt, nt],
        )

    return {
        "conv2d": conv_case,
        "maxpool2d": maxpool_case,
        "batchnorm2d_train": batchnorm_case,
        "batchnorm2d_eval": batchnorm_eval_case,
        "dense": dense_case,
        "relu": relu_case,
        "sigmoid": sigmoid_case,
        "global_avg_pool": gap_case,
        "flatten": flatten_case,
        "dropout": dropout_case,
        "euclidean_distance": euclid_case,
        "contrastive_loss": contrastive_case,
        "triplet_loss": triplet_case,
    }


def run_gradcheck_suite(
    instances: int = 50, seed: int = 0, perturb_layer: str | None = None
) -> list[CheckResult]:
    """Finite-difference check per layer/loss over random small instances."""
    rng = np.random.default_rng(seed)
    results = []
    for name, case_fn in _layer_cases(rng).items():
        worst = 0.0
        for _ in range(instances):
            build, tensors = case_fn()
            perturb = 0.01 if name == perturb_layer else 0.0
            worst = max(worst, gradient_error(build, tensors, perturb=perturb))
        results.append(
            CheckResult(
                name=f"gradcheck/{name}",
                passed=worst < FD_RTOL,
                detail=f"max relative error {worst:.3e} (tolerance {FD_RTOL:.0e})",
            )
        )
    return results


# -- Otsu oracle -------------------------------------------------------


def otsu_bruteforce(levels: np.ndarray) -> tuple[int, np.ndarray]:
    """Literal 255-candidate between-class-variance sweep."""
    if np.unique(levels).size <= 1:
        return 0, np.zeros_like(levels, dtype=bool)
    n = levels.size
    best_t, best_sigma = 0, -1.0
    for t in range(255):
        c0 = levels[levels <= t]
        c1 = levels[levels > t]
        w0 = c0.size / n
        w1 = c1.size / n
        if c0.size == 0 or c1.size == 0:
            sigma = 0.0
        else:
            sigma = w0 * w1 * (c0.mean() - c1.mean()) ** 2
        if sigma > best_sigma:
            best_sigma = sigma
            best_t = t
    return best_t, levels > best_t


def _otsu_test_images(rng, count):
    imgs = []
    side = 12
    imgs.append(np.full((side, side), 0.4))  # constant
    imgs.append((np.arange(side * side).reshape(side, side) % 2).astype(float))  # bimodal
    for _ in range(count - 2):
        kind = rng.integers(3)
        if kind == 0:
            img = rng.random((side, side))
        elif kind == 1:
            a, b = rng.random(2)
            img = np.where(rng.random((side, side)) < 0.5, a, b)
        else:
            img = np.full((side, side), rng.random())
        imgs.append(img)
    return imgs


def run_otsu_suite(count: int = 120, seed: int = 1) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    for idx, arr in enumerate(_otsu_test_images(rng, count)):
        img = imaging.ImageBuffer(arr.shape[0], arr.shape[1], 1, arr[:, :, None])
        t, mask = imaging.otsu_threshold(img)
        t_ref, mask_ref = otsu_bruteforce(imaging.quantize_levels(img))
        if t != t_ref or not np.array_equal(mask.bits, mask_ref):
            return [
                CheckResult(
                    "otsu/bruteforce",
                    False,
                    f"image {idx}: got t={t}, oracle t={t_ref}; "
                    f"pixels={np.unique(arr)[:6]}",
                )
            ]
    return [CheckResult("otsu/bruteforce", True, f"{count} images, exact agreement")]


# -- metric oracles ----------------------------------------------------


def auroc_pairwise(g: np.ndarray, i: np.ndarray) -> float:
    wins = np.sum(g[:, None] > i[None, :]) + 0.5 * np.sum(g[:, None] == i[None, :])
    return float(wins / (g.size * i.size))


def aupr_prefix(g: np.ndarray, i: np.ndarray) -> float:
    """Average precision via explicit prefix walk with tie grouping."""
    scored = sorted(
        [(s, 1) for s in g] + [(s, 0) for s in i], key=lambda x: -x[0]
    )
    ap, tp, fp, prev_r = 0.0, 0, 0, 0.0
    k = 0
    while k < len(scored):
        j = k
        while j < len(scored) and scored[j][0] == scored[k][0]:
            tp += scored[j][1]
            fp += 1 - scored[j][1]
            j += 1
        r = tp / g.size
        p = tp / (tp + fp)
        ap += (r - prev_r) * p
        prev_r = r
        k = j
    return ap


def run_metric_suite(count: int = 1000, seed: int = 2) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    for idx in range(count):
        ng = int(rng.integers(2, 201))
        ni = int(rng.integers(2, 201))
        if rng.random() < 0.2:
            # discretized scores to exercise tie handling
            g = np.round(rng.random(ng), 1)
            i = np.round(rng.random(ni), 1)
        else:
            g = rng.random(ng) + rng.random() * 0.5
            i = rng.random(ni)
        ss = E.ScoreSet(g, i)
        auroc = E.compute_auroc(ss)
        if abs(auroc - auroc_pairwise(g, i)) > 1e-9:
            return [CheckResult("metrics/auroc", False, f"set {idx}: {auroc} vs oracle")]
        aupr = E.compute_aupr(ss)
        ref = aupr_prefix(g, i)
        if abs(aupr - ref) > 1e-9:
            return [CheckResult("metrics/aupr", False, f"set {idx}: {aupr} vs {ref}")]
        # the |FAR-FRR| bound is only achievable when scores are distinct;
        # with ties no threshold can land inside a multi-score jump
        if np.unique(np.concatenate([g, i])).size == ng + ni:
            _, t = E.compute_eer(ss)
            far, frr = E.far_frr(ss, t)
            if abs(far - frr) > 1.0 / min(ng, ni) + 1e-12:
                return [
                    CheckResult(
                        "metrics/eer", False, f"set {idx}: |FAR-FRR|={abs(far - frr)}"
                    )
                ]
    return [CheckResult("metrics/oracles", True, f"{count} score sets within 1e-9")]


# -- pair enumeration --------------------------------------------------


def run_pair_suite(trials: int = 60, seed: int = 3) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    for idx in range(trials):
        n0 = int(rng.integers(0, 26))
        n1 = int(rng.integers(0, 26))
        samples = [
            D.LabeledSample(f"n{i}", "normal", "") for i in range(n0)
        ] + [D.LabeledSample(f"p{i}", "pothole", "") for i in range(n1)]
        groups = D.group_by_class(samples)
        same_ref = {
            frozenset((a.id, b.id))
            for g in groups.values()
            for ii, a in enumerate(g)
            for b in g[ii + 1 :]
        }
        diff_ref = {
            frozenset((a.id, b.id))
            for a in groups.get("normal", [])
            for b in groups.get("pothole", [])
        }
        budget = D.pair_budget({k: len(v) for k, v in groups.items()})
        if budget.genuine_possible != len(same_ref) or budget.imposter_possible != len(diff_ref):
            return [CheckResult("pairs/budget", False, f"trial {idx}: count mismatch")]
        same = D.gen_same_pairs(groups, len(same_ref), int(rng.integers(1 << 30)))
        diff = (
            D.gen_diff_pairs(groups, len(diff_ref), int(rng.integers(1 << 30)))
            if diff_ref
            else []
        )
        if {frozenset((p.a, p.b)) for p in same} != same_ref:
            return [CheckResult("pairs/same", False, f"trial {idx}: set mismatch")]
        if {frozenset((p.a, p.b)) for p in diff} != diff_ref:
            return [CheckResult("pairs/diff", False, f"trial {idx}: set mismatch")]
        for p in same + diff:
            if p.a == p.b or p.a > p.b:
                return [CheckResult("pairs/canonical", False, f"trial {idx}: {p}")]
    return [CheckResult("pairs/enumeration", True, f"{trials} class vectors, exact sets")]


SUITES = {
    "gradcheck": run_gradcheck_suite,
    "otsu": run_otsu_suite,
    "metrics": run_metric_suite,
    "pairs": run_pair_suite,
}


def run_suites(names, **kwargs) -> list[CheckResult]:
    results = []
    for name in names:
        if name == "gradcheck":
            results += run_gradcheck_suite(
                perturb_layer=kwargs.get("perturb_layer")
            )
        else:
            results += SUITES[name]()
    return results
