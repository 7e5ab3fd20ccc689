"""Command-line entry point: make-patches, train, extract, eval, gradcheck.

Exit codes: 0 success, 1 numeric failure, 2 input error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import gradcheck
from .dataset import (
    AugmentationConfig, GenerationError, SequenceError, TupleArchive, build_training_set,
    load_sequence, read_image, synthetic_images, synthetic_pair, write_image,
)
from .evaluation import (
    OVERLAP_THRESHOLD, aggregate_report, format_report, matching_score, repeatability, summary_csv,
)
from .extractor import NMS_RADIUS, extract_with_votemap, random_keypoints, read_keypoints, write_keypoints
from .losses import VARIANTS, LossConfig
from .nn import load_checkpoint
from .trainer import ResumeError, TrainConfig, TrainingDiverged, resume, train

log = logging.getLogger("covfeat")

EXIT_OK, EXIT_NUMERIC, EXIT_INPUT, EXIT_IO = 0, 1, 2, 3
THREADS_ENV = "COVFEAT_THREADS"
IMAGE_GLOBS = ("*.png", "*.ppm", "*.pgm", "*.jpg", "*.jpeg", "*.bmp", "*.tif", "*.tiff")


class InputError(Exception):
    pass


class IOFailure(Exception):
    pass


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:12]


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IOFailure(f"cannot read config {path}: {e}") from e
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON config ({e})") from e
    if not isinstance(cfg, dict):
        raise InputError(f"{path}: config must be a JSON object")
    return cfg


def merged(section: dict, args, names) -> dict:
    """Config-file values overridden by every flag the user actually set."""
    out = dict(section)
    for name in names:
        v = getattr(args, name, None)
        if v is not None:
            out[name] = v
    return out


def open_checkpoint(path):
    try:
        return load_checkpoint(path)
    except (OSError, ValueError, KeyError, IndexError) as e:
        raise IOFailure(f"cannot read checkpoint {path}: {e}") from e


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# -- make-patches ----------------------------------------------------------


AUG_FLAGS = ("scale_range", "shear_range", "rotation_range", "jitter_range",
             "translation_range", "count", "seed")


def cmd_make_patches(args, cfg) -> int:
    sec = merged(cfg.get("augmentation", {}), args, AUG_FLAGS)
    if "count" in sec:
        sec["tuple_count"] = sec.pop("count")
    try:
        aug = AugmentationConfig.from_dict(sec)
    except TypeError as e:
        raise InputError(f"bad augmentation config: {e}") from e
    if args.synthetic:
        images = synthetic_images(args.images, args.image_size, args.image_seed)
        source = {"synthetic": True, "images": args.images, "image_size": args.image_size,
                  "image_seed": args.image_seed}
    else:
        if args.source is None:
            raise InputError("give --source DIR or --synthetic")
        src = Path(args.source)
        if not src.is_dir():
            raise InputError(f"source directory not found: {src}")
        files = sorted(p for g in IMAGE_GLOBS for p in src.glob(g))
        if not files:
            raise InputError(f"no images in {src}")
        images = [read_image(p) for p in files]
        source = {"synthetic": False, "files": [p.name for p in files]}
    record = {"augmentation": aug.to_dict(), "source": source}
    h = config_hash(record)
    build_training_set(images, aug, args.out, meta={"config_hash": h, "source": source})
    print(f"wrote {aug.tuple_count} tuples to {args.out} (config {h})")
    return EXIT_OK


# -- train -------------------------------------------------------------------


TRAIN_FLAGS = ("epochs", "batch_size", "lr", "momentum", "decay", "seed", "checkpoint_interval",
               "init_gain", "output_gain", "lr_scale", "microbatch")
LOSS_FLAGS = ("alpha", "beta", "identity_weight")


def build_train_config(args, cfg) -> TrainConfig:
    sec = merged(cfg.get("train", {}), args, TRAIN_FLAGS)
    loss = dict(sec.pop("loss", {}))
    loss.update(merged(cfg.get("loss", {}), args, LOSS_FLAGS))
    if args.loss is not None:
        loss["variant"] = args.loss
    try:
        return TrainConfig(**sec, loss=LossConfig(**loss))
    except TypeError as e:
        raise InputError(f"bad train config: {e}") from e


def cmd_train(args, cfg) -> int:
    config = build_train_config(args, cfg)
    try:
        data = TupleArchive(args.archive)
    except ValueError as e:
        raise InputError(str(e)) from e
    log.info("training %s for %d epochs on %d tuples (config %s)", config.loss.variant,
             config.epochs, len(data), config.digest())
    if args.resume:
        open_checkpoint(args.resume)
        result = resume(args.resume, data, config, out_checkpoint=args.out, log_path=args.log)
    else:
        result = train(data, config, checkpoint=args.out, log_path=args.log)
    last = result.records[-1] if result.records else {}
    print(f"trained {len(result.records)} steps; final loss {last.get('loss', float('nan')):.6g}; "
          f"checkpoint {args.out} (config {config.digest()})")
    return EXIT_OK


# -- extract ---------------------------------------------------------------


def cmd_extract(args, cfg) -> int:
    sec = merged(cfg.get("extract", {}), args, ("k", "nms_radius", "blur", "normalize"))
    k = int(sec.get("k", 1000))
    radius = int(sec.get("nms_radius", NMS_RADIUS))
    blur = bool(sec.get("blur", False))
    norm = sec.get("normalize", "global")
    net, _, meta = open_checkpoint(args.checkpoint)
    ck_hash = file_digest(args.checkpoint)
    h = config_hash({"k": k, "nms_radius": radius, "blur": blur, "normalize": norm,
                     "checkpoint": ck_hash})
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in args.images:
        image = read_image(path)
        kps, vm = extract_with_votemap(image, net, k=k, nms_radius=radius, blur=blur,
                                       normalize=norm)
        stem = Path(path).stem
        write_keypoints(out_dir / f"{stem}.kps", kps, image_id=Path(path).name,
                        checkpoint_hash=ck_hash, k=k, nms_radius=radius, config_hash=h)
        if args.dump_votemap:
            np.save(out_dir / f"{stem}.votemap.npy", vm.values)
            peak = vm.values.max() if vm.values.size else 0.0
            write_image(out_dir / f"{stem}.votemap.png", vm.values / peak if peak > 0 else vm.values)
        print(f"{path}: {len(kps)} keypoints (requested {k})")
    return EXIT_OK


# -- eval --------------------------------------------------------------------


def _sequences(args):
    if args.synthetic_pairs:
        for i in range(args.synthetic_pairs):
            a, b, h = synthetic_pair(args.pair_seed + i, args.pair_size)
            yield f"synthetic{i:03d}", [a, b], [(0, 1, h)]
        return
    for d in args.sequences:
        seq = load_sequence(d)
        yield seq.name, seq.images, list(seq.pairs())


def _detectors(args):
    """(method name, run index, detect(image, seq, index, k)) for every run."""
    if args.detector == "random":
        runs = args.runs or 1
        for run in range(runs):
            def detect(image, seq, idx, k, run=run):
                rng = np.random.default_rng([args.seed, run, idx, k, int(hashlib.sha256(
                    seq.encode()).hexdigest()[:8], 16)])
                return random_keypoints(image.shape, k, rng)
            yield "random", run, detect
        return
    if args.keypoints:
        base = Path(args.keypoints)

        def detect(image, seq, idx, k):
            kps, _ = read_keypoints(base / seq / f"img{idx + 1}.kps")
            return kps[:k]
        yield "keypoints", 0, detect
        return
    if not args.checkpoint:
        raise InputError("eval needs --checkpoint, --keypoints or --detector random")
    if args.runs is not None and args.runs != len(args.checkpoint):
        raise InputError(f"--runs {args.runs} but {len(args.checkpoint)} checkpoints given")
    for run, path in enumerate(args.checkpoint):
        net, _, meta = open_checkpoint(path)
        cache = {}

        def detect(image, seq, idx, k, net=net, cache=cache):
            key = (seq, idx)
            if key not in cache:
                cache[key] = extract_with_votemap(image, net, k=max(args.k),
                                                  normalize=args.normalize)[0]
            return cache[key][:k]
        yield meta.get("loss_variant", "network"), run, detect


def cmd_eval(args, cfg) -> int:
    sec = merged(cfg.get("eval", {}), args, ("k", "threshold", "matching_k"))
    ks = sorted(set(sec.get("k", [200, 1000])))
    args.k = ks
    threshold = float(sec.get("threshold", OVERLAP_THRESHOLD))
    matching_k = int(sec.get("matching_k", 1000))
    if matching_k not in ks:
        matching_k = ks[-1]
    sequences = list(_sequences(args))
    rows = []
    for method, run, detect in _detectors(args):
        for name, images, pairs in sequences:
            for ia, ib, h in pairs:
                a, b = images[ia], images[ib]
                for k in ks:
                    ka, kb = detect(a, name, ia, k), detect(b, name, ib, k)
                    rep = repeatability(ka, kb, h, a.shape, b.shape, threshold, name, (ia, ib))
                    row = {"method": method, "run": run, "dataset": name if args.per_sequence
                           else "all", "sequence": name, "pair": f"{ia + 1}-{ib + 1}", "k": k,
                           "repeatability": rep.repeatability,
                           "correspondences": rep.correspondences}
                    if args.matching and k == matching_k:
                        ms = matching_score(a, b, ka, kb, h, threshold, sequence=name,
                                            pair=(ia, ib))
                        row["matching_score"] = ms.score
                    rows.append(row)
    summary = aggregate_report(rows)
    h = config_hash({"k": ks, "threshold": threshold, "matching": bool(args.matching),
                     "matching_k": matching_k, "detector": args.detector,
                     "normalize": args.normalize,
                     "checkpoints": [file_digest(p) for p in args.checkpoint or []]})
    report = f"# config {h}\n" + format_report(summary, ks=tuple(ks))
    out = Path(args.out) if args.out else None
    if out:
        out.write_text(report)
        out.with_suffix(".csv").write_text(f"# config {h}\n" + summary_csv(summary))
    print(report, end="")
    if args.emit_plot_data:
        plot = Path(args.emit_plot_data)
        plot.mkdir(parents=True, exist_ok=True)
        fields = ["method", "run", "dataset", "sequence", "pair", "k", "repeatability",
                  "matching_score", "correspondences"]
        with open(plot / "pairs.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({key: r.get(key, "") for key in fields})
        (plot / "summary.csv").write_text(summary_csv(summary))
    return EXIT_OK


# -- gradcheck ---------------------------------------------------------------


def cmd_gradcheck(args, cfg) -> int:
    layers = args.layer or None
    reports = gradcheck.run_all(args.seed, layers)
    for r in reports:
        print(r.line())
    worst = max(r.max_rel_error for r in reports)
    ok = all(r.passed for r in reports)
    print(f"{'PASS' if ok else 'FAIL'}: max relative error {worst:.3e} "
          f"(tolerance {gradcheck.TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="covfeat", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--threads", type=int, default=None,
                   help=f"BLAS threads (default: ${THREADS_ENV} or library default)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    mp = sub.add_parser("make-patches", help="generate a training tuple archive")
    mp.add_argument("--source", help="directory of training images")
    mp.add_argument("--synthetic", action="store_true", help="use procedural images")
    mp.add_argument("--images", type=int, default=16, help="synthetic image count")
    mp.add_argument("--image-size", type=int, default=256)
    mp.add_argument("--image-seed", type=int, default=1000)
    mp.add_argument("--count", type=int, help="tuples to generate (default 256000)")
    mp.add_argument("--seed", type=int)
    for name in ("scale", "shear", "rotation", "jitter", "translation"):
        mp.add_argument(f"--{name}-range", type=float, nargs=2, metavar=("LO", "HI"))
    mp.add_argument("--out", required=True)
    mp.set_defaults(func=cmd_make_patches)

    tp = sub.add_parser("train", help="train a detector on a tuple archive")
    tp.add_argument("archive")
    tp.add_argument("--out", required=True, help="checkpoint path")
    tp.add_argument("--log", help="JSONL log path")
    tp.add_argument("--loss", choices=VARIANTS)
    tp.add_argument("--alpha", type=float)
    tp.add_argument("--beta", type=float)
    tp.add_argument("--identity-weight", type=float)
    tp.add_argument("--epochs", type=int)
    tp.add_argument("--batch", dest="batch_size", type=int)
    tp.add_argument("--lr", type=float)
    tp.add_argument("--momentum", type=float)
    tp.add_argument("--decay", type=float)
    tp.add_argument("--seed", type=int)
    tp.add_argument("--checkpoint-interval", type=int)
    tp.add_argument("--init-gain", type=float)
    tp.add_argument("--output-gain", type=float, help="extra init factor on the last layer")
    tp.add_argument("--lr-scale", type=float,
                    help="per-layer step factor lr_scale/fan_in (0 disables)")
    tp.add_argument("--microbatch", type=int)
    tp.add_argument("--resume", help="continue from this checkpoint")
    tp.set_defaults(func=cmd_train)

    ep = sub.add_parser("extract", help="detect keypoints with a trained network")
    ep.add_argument("images", nargs="+")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("-k", "--k", type=int)
    ep.add_argument("--nms-radius", type=int)
    ep.add_argument("--blur", action="store_true", default=None)
    ep.add_argument("--normalize", choices=("global", "window"),
                    help="image standardization before regression (default global)")
    ep.add_argument("--out-dir", default=".")
    ep.add_argument("--dump-votemap", action="store_true")
    ep.set_defaults(func=cmd_extract)

    vp = sub.add_parser("eval", help="repeatability / matching score on image sequences")
    vp.add_argument("sequences", nargs="*", help="sequence directories")
    vp.add_argument("--checkpoint", action="append", help="one per training run")
    vp.add_argument("--keypoints", help="directory of <sequence>/img<N>.kps files")
    vp.add_argument("--detector", choices=("network", "random"), default="network")
    vp.add_argument("--normalize", choices=("global", "window"), default="global")
    vp.add_argument("--runs", type=int)
    vp.add_argument("--seed", type=int, default=0)
    vp.add_argument("-k", "--k", type=int, nargs="+")
    vp.add_argument("--threshold", type=float)
    vp.add_argument("--matching", action="store_true", help="also compute matching score")
    vp.add_argument("--matching-k", type=int)
    vp.add_argument("--per-sequence", action="store_true", help="report each sequence separately")
    vp.add_argument("--synthetic-pairs", type=int, default=0,
                    help="evaluate on N procedural affine pairs instead of directories")
    vp.add_argument("--pair-seed", type=int, default=50_000)
    vp.add_argument("--pair-size", type=int, default=768)
    vp.add_argument("--out", help="report path (a .csv summary is written next to it)")
    vp.add_argument("--emit-plot-data", metavar="DIR", help="write per-pair columnar data")
    vp.set_defaults(func=cmd_eval)

    gp = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gp.add_argument("--seed", type=int, default=0)
    gp.add_argument("--layer", type=int, action="append", help="restrict to layer N (1-5)")
    gp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    threads = args.threads
    if threads is None and os.environ.get(THREADS_ENV):
        try:
            threads = int(os.environ[THREADS_ENV])
        except ValueError:
            print(f"error: {THREADS_ENV} must be an integer", file=sys.stderr)
            return EXIT_INPUT
    try:
        cfg = load_config(args.config)
        with threadpool_limits(limits=threads):
            return args.func(args, cfg)
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, SequenceError, GenerationError, ResumeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (IOFailure, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
