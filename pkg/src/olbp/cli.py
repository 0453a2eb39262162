"""``olbp`` command-line entry point.

Subcommands: synth, transform, train, infer, eval, gradcheck.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, pngio
from .checkpoint import CheckpointError
from .config import build_configs, read_config_file, write_config_file
from .dataset import (DEFAULT_THETA, DatasetManifest, NoGazedObjectError, SampleRecord, SceneSpec,
                      gen_synthetic_scene, inject_noise, split_dataset, stats_line, transform_sample)
from .fixation import make_fdm, read_fixations, sigma_for_width, write_fixations
from .model import ABLATIONS, ConfigError, Network
from .tensor import NumericalError

log = logging.getLogger("olbp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def workers() -> int:
    cap = os.environ.get("OLBP_THREADS")
    n = os.cpu_count() or 1
    return max(1, min(n, int(cap))) if cap else n


def pool_map(fn, items, n_workers: int):
    """Ordered map, in a process pool when it pays off."""
    items = list(items)
    if n_workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * n_workers))))


def versions() -> dict:
    import PIL
    import scipy
    return {"olbp": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "pillow": PIL.__version__, "python": platform.python_version()}


def write_provenance(out_dir: Path, command: str, args: argparse.Namespace, **extra) -> None:
    rec = {"command": command, "seed": getattr(args, "seed", None), "versions": versions(),
           "args": {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}}
    rec.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "provenance.json").write_text(json.dumps(rec, indent=2, sort_keys=True, default=str) + "\n")


def resolve(root: Path, p) -> Path | None:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else root / p


# ---------------------------------------------------------------------------
# transform

def _transform_one(job):
    """Worker: three-step transformation for one (image, subject) pair."""
    (sid, image_id, subject, sem_path, fix_path, img_path, out, theta, noise, seed) = job
    sem = pngio.load_labels(sem_path)
    h, w = sem.shape
    fm = read_fixations(fix_path, w, h)
    if noise:
        fm = inject_noise(sem, fm, noise, np.random.default_rng([seed, _stable_int(sid)]))
        fix_path = out / "fixations" / f"{sid}.txt"
        write_fixations(fix_path, fm)
    try:
        res = transform_sample(sem, fm, theta)
    except NoGazedObjectError:
        return None, sid
    gt_path, bnd_path = out / "gt" / f"{sid}.png", out / "boundary" / f"{sid}.png"
    pngio.save_mask(gt_path, res.binary_gt)
    pngio.save_mask(bnd_path, res.boundary_gt)
    rel = lambda p: os.path.relpath(p, out)  # noqa: E731
    rec = SampleRecord(sid, image_id, subject, rel(img_path) if img_path else "", rel(fix_path),
                       rel(sem_path), rel(gt_path), rel(bnd_path), res.constrained)
    return rec, None


def _stable_int(text: str) -> int:
    return int(hashlib.sha256(text.encode()).hexdigest()[:15], 16)


def run_transform(sem_dir: Path, fix_dir: Path, out: Path, theta: int = DEFAULT_THETA,
                  image_dir: Path | None = None, noise: float = 0.0, seed: int = 0,
                  train_images: int | None = None, n_workers: int = 1) -> DatasetManifest:
    """``sem_dir/<image>.png`` + ``fix_dir/<image>/<subject>.txt`` -> GT PNGs and manifest."""
    for sub in ("gt", "boundary") + (("fixations",) if noise else ()):
        (out / sub).mkdir(parents=True, exist_ok=True)
    jobs = []
    for sem_path in sorted(sem_dir.glob("*.png")):
        image_id = sem_path.stem
        img_path = image_dir / f"{image_id}.png" if image_dir else None
        for fix_path in sorted((fix_dir / image_id).glob("*.txt")):
            sid = f"{image_id}_{fix_path.stem}"
            jobs.append((sid, image_id, fix_path.stem, sem_path, fix_path, img_path, out, theta, noise, seed))
    if not jobs:
        raise FileNotFoundError(f"no <image>.png in {sem_dir} with fixation files under {fix_dir}/<image>/")
    results = pool_map(_transform_one, jobs, n_workers)
    manifest = DatasetManifest([r for r, _ in results if r is not None],
                               [s for _, s in results if s is not None])
    if train_images is not None:
        manifest = split_dataset(manifest, train_images, seed)
    manifest.write(out / "manifest.jsonl")
    (out / "rejected.txt").write_text("".join(s + "\n" for s in manifest.rejected))
    return manifest


def cmd_transform(args, root: Path) -> int:
    out = resolve(root, args.out)
    m = run_transform(resolve(root, args.sem_dir), resolve(root, args.fix_dir), out, args.theta,
                      resolve(root, args.image_dir), args.noise or 0.0, args.seed, args.train_images, workers())
    for sid in m.rejected:
        print(f"rejected {sid}: no gazed object")
    print(stats_line(m))
    write_provenance(out, "transform", args)
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth

def cmd_synth(args, root: Path) -> int:
    out = resolve(root, args.out)
    for sub in ("images", "labels", "fixations"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    spec = SceneSpec(size=args.size, subjects=args.subjects, bg_fix_prob=args.bg_fix_prob,
                     objects=tuple(args.objects), object_size=tuple(args.object_size))
    rng = np.random.default_rng(args.seed)
    for i in range(args.images):
        scene = gen_synthetic_scene(spec, rng)
        image_id = f"img{i:04d}"
        pngio.save_rgb(out / "images" / f"{image_id}.png", scene.image)
        pngio.save_labels(out / "labels" / f"{image_id}.png", scene.labels)
        (out / "fixations" / image_id).mkdir(exist_ok=True)
        for k, fm in enumerate(scene.fixation_maps):
            write_fixations(out / "fixations" / image_id / f"s{k:02d}.txt", fm)
    train_images = args.train_images
    if train_images is None:
        train_images = int(0.8 * args.images) if args.images > 1 else 0
    m = run_transform(out / "labels", out / "fixations", out, args.theta, out / "images",
                      0.0, args.seed, train_images, workers())
    print(f"{len(m.records)} samples from {args.images} images")
    print(stats_line(m))
    write_provenance(out, "synth", args)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

def _train_overrides(args) -> dict:
    return {"lr": args.lr, "total_iters": args.iters, "iter_size": args.iter_size,
            "batch_size": args.batch_size, "rng_seed": args.seed, "checkpoint_every": args.checkpoint_every,
            "lr_drop_iter": args.lr_drop_iter, "dropout": args.dropout, "log_every": args.log_every}


def cmd_train(args, root: Path) -> int:
    from .pipeline import load_manifest_samples
    from .trainer import CSVLog, TrainState, load_train_checkpoint, save_train_checkpoint, train_hash, train_loop

    file_values = read_config_file(resolve(root, args.config)) if args.config else None
    model_cfg, train_cfg = build_configs(args.preset, args.ablation, file_values, _train_overrides(args),
                                         {"rng_seed": args.seed})
    abl_name = next((k for k, v in ABLATIONS.items() if v == model_cfg.ablation), "custom")
    print(f"preset {model_cfg.scale_preset}  ablation {abl_name}  "
          f"input {model_cfg.input_size[0]}x{model_cfg.input_size[1]}")
    print(f"lr {train_cfg.lr:g}  iters {train_cfg.total_iters:,}  lr drop at {train_cfg.lr_drop_iter:,} "
          f"(/{train_cfg.lr_drop_factor:g})  momentum {train_cfg.momentum:g}  weight decay {train_cfg.weight_decay:g}  "
          f"batch {train_cfg.batch_size}  iter size {train_cfg.iter_size}  dropout {train_cfg.dropout:g}")
    net = Network(model_cfg)
    print(f"parameters {net.num_parameters():,}  config hash {train_hash(model_cfg, train_cfg)}")
    if args.dry_run:
        return EXIT_OK
    if not args.manifest:
        raise UsageError("train: --manifest is required unless --dry-run is given")
    out = resolve(root, args.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    manifest_path = resolve(root, args.manifest)
    manifest = DatasetManifest.read(manifest_path)
    split = "train" if manifest.split_records("train") else None
    samples = load_manifest_samples(manifest, manifest_path.parent, split, model_cfg.input_size[:2], args.sigma)
    if not samples:
        raise ValueError(f"{manifest_path}: no training samples")
    state = None
    if args.resume:
        net, train_cfg_ck, state = load_train_checkpoint(resolve(root, args.resume))
        if train_hash(net.cfg, train_cfg_ck) != train_hash(model_cfg, train_cfg):
            print("warning: resuming with a configuration that differs from the checkpoint's", file=sys.stderr)
    write_config_file(out / "config.ini", model_cfg, train_cfg)
    csv_log = CSVLog(out / "train_log.csv")
    every = max(1, train_cfg.total_iters // 20)

    def echo(rec):
        if rec["iteration"] % every == 0 or rec["iteration"] == 1:
            print(f"iter {rec['iteration']:>6}  lr {rec['lr']:.3g}  loss {rec['total']:.4f}", flush=True)

    try:
        state = train_loop(net, samples, train_cfg, [csv_log, echo], state or TrainState(0),
                           checkpoint_dir=out / "checkpoints")
    finally:
        csv_log.close()
    save_train_checkpoint(out / "final.olbp", net, train_cfg, state)
    print(f"wrote {out / 'final.olbp'}")
    write_provenance(out, "train", args, config_hash=train_hash(model_cfg, train_cfg))
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer

def cmd_infer(args, root: Path) -> int:
    from .pipeline import load_record_sample, make_sample, predict
    from .trainer import load_train_checkpoint

    net, _, _ = load_train_checkpoint(resolve(root, args.checkpoint))
    hw = net.cfg.input_size[:2]
    if args.manifest:
        manifest_path = resolve(root, args.manifest)
        manifest = DatasetManifest.read(manifest_path)
        recs = manifest.records if args.split == "all" else manifest.split_records(args.split)
        if not recs:
            raise ValueError(f"{manifest_path}: no records in split {args.split!r}")
        samples = [load_record_sample(r, manifest_path.parent, hw, args.sigma) for r in recs]
        out_dir = resolve(root, args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        for s, prob in zip(samples, predict(net, samples)):
            pngio.save_probability(out_dir / f"{s.sample_id}.png", prob)
        print(f"wrote {len(samples)} probability maps to {out_dir}")
        write_provenance(out_dir, "infer", args, config_hash=net.cfg.config_hash())
        return EXIT_OK
    if not (args.image and args.fixations):
        raise UsageError("infer: give --image and --fixations, or --manifest")
    image = pngio.load_rgb(resolve(root, args.image))
    fm = read_fixations(resolve(root, args.fixations), image.shape[1], image.shape[0])
    prob = predict(net, [make_sample("input", image, fm, None, None, hw, args.sigma)])[0]
    out = resolve(root, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pngio.save_probability(out, prob)
    print(f"wrote {out} ({prob.shape[1]}x{prob.shape[0]})")
    write_provenance(out.parent, "infer", args, config_hash=net.cfg.config_hash())
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args, root: Path) -> int:
    from .metrics import evaluate_dataset

    manifest_path = resolve(root, args.manifest)
    manifest = DatasetManifest.read(manifest_path)
    base = manifest_path.parent
    recs = manifest.records if args.split == "all" else manifest.split_records(args.split)
    if not recs:
        raise ValueError(f"{manifest_path}: no records in split {args.split!r}")
    pred_dir = resolve(root, args.pred_dir)
    preds, gts = {}, {}
    for r in recs:
        gts[r.sample_id] = pngio.load_mask(base / r.binary_gt_path)
        p = pred_dir / f"{r.sample_id}.png"
        if p.exists():
            preds[r.sample_id] = pngio.load_probability(p)
    groups = None
    if args.js:
        groups = {}
        for r in recs:
            h, w = gts[r.sample_id].shape
            fm = read_fixations(base / r.fixation_path, w, h)
            sigma = args.sigma or sigma_for_width(w)
            groups.setdefault(r.image_id, []).append(make_fdm(fm, sigma).grid)
    report = evaluate_dataset(preds, gts, groups, workers())
    out = resolve(root, args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "per_sample.csv")
    report.write_json(out / "summary.json")
    print(f"{len(report.rows)} samples  {report.table_line()}")
    for image_id, v in sorted(report.js.items()):
        print(f"{image_id}  mean JS {v['mean_js']:.3f} over {v['pairs']} pairs")
    write_provenance(out, "eval", args)
    if report.missing:
        for sid in report.missing:
            print(f"missing prediction for sample {sid}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck

def cmd_gradcheck(args, root: Path) -> int:
    from .gradcheck import network_grad_check
    from .model import OLBPConfig
    from .opcheck import OP_CHECKS, run_op_checks

    if args.ops is None and args.network is None:
        raise UsageError("gradcheck: give --ops and/or --network")
    ok = True
    if args.ops is not None:
        names = sorted(OP_CHECKS) if args.ops == "all" else args.ops.split(",")
        unknown = [n for n in names if n not in OP_CHECKS]
        if unknown:
            raise UsageError(f"gradcheck: unknown op(s) {unknown}; choose from all,{','.join(sorted(OP_CHECKS))}")
        for name, seed, rep in run_op_checks(names, seeds=range(args.seeds)):
            ok &= rep.passed
            print(f"{'PASS' if rep.passed else 'FAIL'}  {name:<16} seed {seed}  max rel err {rep.max_rel_error:.2e}")
    if args.network is not None:
        if args.network not in ("toy", "tiny"):
            raise UsageError(f"gradcheck: unknown network scope {args.network!r}; choose toy or tiny")
        rep = network_grad_check(OLBPConfig.preset(args.network), n_params=args.params, seed=args.seed)
        ok &= rep.passed
        print(f"{'PASS' if rep.passed else 'FAIL'}  network {args.network:<8} {rep.checked} params  "
              f"max rel err {rep.max_rel_error:.2e}  (tol {rep.tol:g}, skipped {rep.skipped})")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------

def build_parser() -> Parser:
    p = Parser(prog="olbp", description=__doc__.splitlines()[0])
    p.add_argument("--root", default=".", help="base directory for relative paths")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=Parser)

    s = sub.add_parser("synth", help="generate a synthetic PFOS dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--images", type=int, default=40)
    s.add_argument("--subjects", type=int, default=2)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--objects", type=int, nargs=2, default=(3, 4), metavar=("MIN", "MAX"))
    s.add_argument("--object-size", type=int, nargs=2, default=(12, 24), metavar=("MIN", "MAX"))
    s.add_argument("--bg-fix-prob", type=float, default=0.0)
    s.add_argument("--train-images", type=int, default=None, help="default: 80%% of images")
    s.add_argument("--theta", type=int, default=DEFAULT_THETA)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("transform", help="semantic labels + fixations -> binary/boundary GTs")
    t.add_argument("--sem-dir", required=True)
    t.add_argument("--fix-dir", required=True)
    t.add_argument("--image-dir")
    t.add_argument("--out", required=True)
    t.add_argument("--theta", type=int, default=DEFAULT_THETA)
    t.add_argument("--noise", type=float, default=None, help="fraction of extra background fixations")
    t.add_argument("--train-images", type=int, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_transform)

    r = sub.add_parser("train", help="train a network")
    r.add_argument("--manifest")
    r.add_argument("--config")
    r.add_argument("--preset", choices=("toy", "paper", "tiny"), default="toy")
    r.add_argument("--ablation", choices=sorted(ABLATIONS), default=None)
    r.add_argument("--out", default="run")
    r.add_argument("--iters", type=int)
    r.add_argument("--lr", type=float)
    r.add_argument("--lr-drop-iter", type=int)
    r.add_argument("--iter-size", type=int)
    r.add_argument("--batch-size", type=int)
    r.add_argument("--dropout", type=float)
    r.add_argument("--checkpoint-every", type=int)
    r.add_argument("--log-every", type=int)
    r.add_argument("--sigma", type=float, help="FDM sigma in native pixels (default scales 24 px per 800)")
    r.add_argument("--resume")
    r.add_argument("--dry-run", action="store_true", help="build the network and print the configuration")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict probability maps")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image")
    i.add_argument("--fixations")
    i.add_argument("--manifest")
    i.add_argument("--split", default="test", choices=("train", "test", "unassigned", "all"))
    i.add_argument("--sigma", type=float)
    i.add_argument("--out", required=True, help="PNG path, or directory with --manifest")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score probability maps against GTs")
    e.add_argument("--pred-dir", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test", choices=("train", "test", "unassigned", "all"))
    e.add_argument("--out", required=True)
    e.add_argument("--js", action="store_true", help="per-image mean pairwise JS of subject FDMs")
    e.add_argument("--sigma", type=float)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--ops", help="'all' or comma-separated op names")
    g.add_argument("--network", help="toy or tiny")
    g.add_argument("--params", type=int, default=50)
    g.add_argument("--seeds", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args, Path(args.root))
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
