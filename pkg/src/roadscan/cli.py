"""Command-line entry point.

Subcommands: synth, train, eval, classify, verify. Every command
writes a run manifest next to its outputs so invocations can be
reproduced exactly. Exit codes: 0 success, 1 I/O error, 2 usage or
validation error, 3 training divergence, 4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import evaluation as E
from . import imaging
from . import network as N
from . import selfcheck
from . import training as TR

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_DIVERGENCE = 3
EXIT_VERIFY = 4


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _seed_override(seed: int) -> int:
    env = os.environ.get("ROADSCAN_SEED")
    return int(env) if env else seed


def _write_manifest(out_path: Path, command: str, config: dict, seed: int,
                    inputs: dict, outputs: dict, t0: float):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "tool_version": __version__,
        "seed_env_override": "ROADSCAN_SEED" in os.environ,
        "duration_seconds": round(time.time() - t0, 3),
    }
    path = Path(str(out_path) + ".manifest.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def preprocess_sample(raw: imaging.ImageBuffer, size: int, input_mode: str) -> np.ndarray:
    """Resize then normalize to a [C,size,size] float32 tensor.

    Raw mode keeps RGB; otsu_binary mode feeds the thresholded mask as
    a single channel.
    """
    img = imaging.resize_bilinear(raw, size, size)
    if input_mode == "otsu_binary":
        gray = imaging.to_grayscale(img)
        _, mask = imaging.otsu_threshold(gray)
        img = imaging.ImageBuffer(size, size, 1, mask.bits.astype(np.float64)[:, :, None])
        return imaging.normalize_image(img, [0.5], [0.5])
    if img.channels == 1:
        img = imaging.ImageBuffer(size, size, 3, np.repeat(img.pixels, 3, axis=2))
    return imaging.normalize_image(img, [0.5, 0.5, 0.5], [0.5, 0.5, 0.5])


def load_images(samples, size: int, input_mode: str) -> dict:
    out = {}
    for s in samples:
        raw = imaging.decode_image(Path(s.source).read_bytes())
        out[s.id] = preprocess_sample(raw, size, input_mode)
    return out


# -- subcommands -------------------------------------------------------


def cmd_synth(args) -> int:
    t0 = time.time()
    seed = _seed_override(args.seed)
    try:
        files = D.gen_synthetic_dataset(args.per_class, args.side, seed, args.out)
    except ValueError as e:
        raise CliError(str(e), EXIT_USAGE)
    except OSError as e:
        raise CliError(f"cannot write dataset: {e}", EXIT_IO)
    _write_manifest(
        Path(args.out) / "dataset", "synth",
        {"per_class": args.per_class, "side": args.side}, seed,
        {}, {"root": str(args.out), "files": len(files)}, t0,
    )
    print(f"wrote {len(files)} images under {args.out}")
    return EXIT_OK


def _load_config(args) -> TR.TrainConfig:
    if args.config:
        config = TR.TrainConfig.from_json(args.config)
    else:
        config = TR.TrainConfig()
    if args.input_mode:
        config.input_mode = args.input_mode
    if args.preset:
        config.preset = args.preset
    config.seed = _seed_override(config.seed)
    return config


def cmd_train(args) -> int:
    t0 = time.time()
    try:
        config = _load_config(args)
    except TR.ParameterError as e:
        raise CliError(str(e), EXIT_USAGE)
    try:
        samples, decode_errors = D.load_dataset_directory(args.data)
    except D.LayoutError as e:
        raise CliError(str(e), EXIT_USAGE)
    for err in decode_errors:
        print(f"warning: {err}", file=sys.stderr)
    groups = D.group_by_class(samples)
    for label, members in groups.items():
        if len(members) < 4:
            raise CliError(
                f"class {label!r} has only {len(members)} usable images", EXIT_USAGE
            )

    channels = 1 if config.input_mode == "otsu_binary" else 3
    images = load_images(samples, config.image_size, config.input_mode)

    # per-class seeded split into train and validation
    rng = np.random.default_rng(config.seed)
    train_s, val_s = [], []
    for label in sorted(groups):
        pool = sorted(groups[label], key=lambda s: s.id)
        order = rng.permutation(len(pool))
        n_val = max(2, int(round(len(pool) * config.val_fraction)))
        val_s += [pool[i] for i in order[:n_val]]
        train_s += [pool[i] for i in order[n_val:]]

    try:
        spec = N.preset_spec(
            config.preset,
            input_shape=(channels, config.image_size, config.image_size),
        )
    except N.SpecError as e:
        raise CliError(str(e), EXIT_USAGE)
    model = N.SiameseModel.create(spec, seed=config.seed)
    model.input_mode = config.input_mode

    tg = D.group_by_class(train_s)
    vg = D.group_by_class(val_s)
    if config.loss_kind == "triplet":
        n_train = min(config.triplet_budget, D.max_distinct_triplets(tg))
        n_val = min(max(config.triplet_budget // 5, 10), D.max_distinct_triplets(vg))
        train_units = D.sample_triplets(tg, n_train, config.seed)
        val_units = D.sample_triplets(vg, n_val, config.seed + 1)
    else:
        half = config.pair_budget // 2
        budget = D.pair_budget({k: len(v) for k, v in tg.items()})
        train_units = D.gen_same_pairs(tg, min(half, budget.genuine_possible), config.seed)
        train_units += D.gen_diff_pairs(tg, min(half, budget.imposter_possible), config.seed)
        vb = D.pair_budget({k: len(v) for k, v in vg.items()})
        vhalf = max(config.pair_budget // 10, 5)
        val_units = D.gen_same_pairs(vg, min(vhalf, vb.genuine_possible), config.seed + 1)
        val_units += D.gen_diff_pairs(vg, min(vhalf, vb.imposter_possible), config.seed + 1)

    try:
        history = TR.train(model, train_units, val_units, images, config)
    except TR.DivergenceError as e:
        raise CliError(str(e), EXIT_DIVERGENCE)
    except TR.ParameterError as e:
        raise CliError(str(e), EXIT_USAGE)

    # calibrate the probability layer and the operating threshold on pairs
    half = config.pair_budget // 2
    budget = D.pair_budget({k: len(v) for k, v in tg.items()})
    fit_pairs = D.gen_same_pairs(tg, min(half, budget.genuine_possible), config.seed + 2)
    fit_pairs += D.gen_diff_pairs(tg, min(half, budget.imposter_possible), config.seed + 2)
    TR.fit_similarity_head(model, fit_pairs, images, config.similarity_epochs)
    vb = D.pair_budget({k: len(v) for k, v in vg.items()})
    vhalf = max(config.pair_budget // 10, 5)
    val_pairs = D.gen_same_pairs(vg, min(vhalf, vb.genuine_possible), config.seed + 3)
    val_pairs += D.gen_diff_pairs(vg, min(vhalf, vb.imposter_possible), config.seed + 3)
    val_scores = E.score_pairs(model, val_pairs, images)
    _, model.threshold = E.compute_eer(val_scores)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    N.save_checkpoint(model, out)
    history.write_csv(out.with_suffix(out.suffix + ".history.csv"))
    _write_manifest(
        out, "train", config.to_dict(), config.seed,
        {"data": str(args.data), "config": args.config},
        {"checkpoint": str(out), "history": str(out.with_suffix(out.suffix + ".history.csv"))},
        t0,
    )
    print(
        f"trained {config.preset} ({config.loss_kind} loss): "
        f"best epoch {history.best_epoch}, "
        f"val loss {history.val_loss[history.best_epoch - 1]:.4f}, "
        f"threshold {model.threshold:.4f}"
    )
    return EXIT_OK


def _load_model(path) -> N.SiameseModel:
    try:
        return N.load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint {path} does not exist", EXIT_USAGE)
    except N.CheckpointError as e:
        raise CliError(f"cannot load {path}: {e}", EXIT_USAGE)


def cmd_eval(args) -> int:
    t0 = time.time()
    model = _load_model(args.model)
    shape = model.embed.spec.input_shape
    size = shape[1] if len(shape) == 3 else None
    if size is None:
        raise CliError("checkpoint embeds vectors, not images; eval needs an image model", EXIT_USAGE)
    try:
        samples, decode_errors = D.load_dataset_directory(args.data)
    except D.LayoutError as e:
        raise CliError(str(e), EXIT_USAGE)
    for err in decode_errors:
        print(f"warning: {err}", file=sys.stderr)
    if not samples:
        raise CliError("test set is empty", EXIT_USAGE)
    images = load_images(samples, size, model.input_mode)
    scores = E.build_score_set(model, samples, images)
    report, roc_rows, pr_rows = E.full_report(scores)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    with open(args.report, "w") as fh:
        fh.write(report.to_json() + "\n")
    outputs = {"report": str(args.report)}
    if args.curves:
        roc_path, pr_path = E.write_curves(roc_rows, pr_rows, args.curves)
        outputs.update({"roc": roc_path, "pr": pr_path})
    if args.plot:
        E.render_curves_svg(report, roc_rows, pr_rows, args.plot)
        outputs["plot"] = str(args.plot)
    _write_manifest(
        Path(args.report), "eval", {}, 0,
        {"model": str(args.model), "data": str(args.data)}, outputs, t0,
    )
    print(
        f"eer={report.eer:.4f} auroc={report.auroc:.4f} aupr={report.aupr:.4f} "
        f"accuracy={report.accuracy:.4f}"
    )
    return EXIT_OK


def cmd_classify(args) -> int:
    t0 = time.time()
    model = _load_model(args.model)
    shape = model.embed.spec.input_shape
    size = shape[1]
    try:
        gallery_samples, _ = D.load_dataset_directory(args.gallery)
    except D.LayoutError as e:
        raise CliError(str(e), EXIT_USAGE)
    groups = D.group_by_class(gallery_samples)
    if len(groups) < 2 or any(not v for v in groups.values()):
        raise CliError("gallery must hold references for both classes", EXIT_USAGE)
    gallery_images = load_images(gallery_samples, size, model.input_mode)
    emb = E.embed_samples(model, [s.id for s in gallery_samples], gallery_images)
    gallery = {
        label: [emb[s.id] for s in members] for label, members in groups.items()
    }
    try:
        raw = imaging.decode_image(Path(args.image).read_bytes())
    except FileNotFoundError:
        raise CliError(f"image {args.image} does not exist", EXIT_USAGE)
    except imaging.DecodeError as e:
        raise CliError(f"cannot decode {args.image}: {e}", EXIT_USAGE)
    x = preprocess_sample(raw, size, model.input_mode)
    threshold = args.threshold if args.threshold is not None else model.threshold
    label, evidence = E.classify_image(model, gallery, x, threshold)
    print(json.dumps({"label": label, "evidence": evidence, "threshold": threshold}))
    _write_manifest(
        Path(args.image), "classify", {"threshold": threshold}, 0,
        {"model": str(args.model), "gallery": str(args.gallery), "image": str(args.image)},
        {"label": label}, t0,
    )
    return EXIT_OK


def cmd_verify(args) -> int:
    names = list(selfcheck.SUITES) if args.suite == "all" else [args.suite]
    results = selfcheck.run_suites(names, perturb_layer=args.perturb_gradient)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {status}  {r.detail}")
    if all(r.passed for r in results):
        return EXIT_OK
    first = next(r for r in results if not r.passed)
    print(f"verification failed: {first.name}: {first.detail}", file=sys.stderr)
    return EXIT_VERIFY


# -- parser ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="roadscan",
        description="Pothole verification: synthesize data, train, evaluate, classify.",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic road/pothole dataset")
    sp.add_argument("--out", required=True, help="output dataset directory")
    sp.add_argument("--per-class", type=int, required=True)
    sp.add_argument("--side", type=int, default=64, help="image side in pixels")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="train the Siamese verifier")
    tp.add_argument("--data", required=True, help="dataset root (normal/, potholes/)")
    tp.add_argument("--config", help="JSON training config")
    tp.add_argument("--out", required=True, help="checkpoint output path")
    tp.add_argument("--input-mode", choices=["raw", "otsu"], dest="input_mode")
    tp.add_argument("--preset", choices=N.PRESET_NAMES)
    tp.set_defaults(func=cmd_train)

    ep = sub.add_parser("eval", help="score all test pairs and report metrics")
    ep.add_argument("--model", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--report", required=True, help="metrics JSON output")
    ep.add_argument("--curves", help="prefix for ROC/PR CSV files")
    ep.add_argument("--plot", help="SVG output rendering both curves")
    ep.set_defaults(func=cmd_eval)

    cp = sub.add_parser("classify", help="label one image against a gallery")
    cp.add_argument("--model", required=True)
    cp.add_argument("--gallery", required=True)
    cp.add_argument("--image", required=True)
    cp.add_argument("--threshold", type=float)
    cp.set_defaults(func=cmd_classify)

    vp = sub.add_parser("verify", help="run the self-verification oracle suites")
    vp.add_argument(
        "--suite",
        choices=["gradcheck", "otsu", "metrics", "pairs", "all"],
        default="all",
    )
    vp.add_argument("--perturb-gradient", help=argparse.SUPPRESS)
    vp.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "input_mode", None) == "otsu":
        args.input_mode = "otsu_binary"
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
