"""Command-line front end: phantom generation, training, evaluation,
cross-validation, and the data-efficiency sweep.

Every command writes the resolved configuration next to its outputs as
run_config.json, takes a lock file in the output directory while it
writes, exits 0 on success, and on failure prints one JSON line to
stderr with a machine-readable error category.  All commands are
deterministic for a fixed seed; --deterministic records the intent in
the run config (computation here is single-threaded, so determinism
needs no special mode).

Config files are JSON with optional "pipeline" and "train" sections
holding field names of the two config dataclasses; explicit CLI flags
override file values, and the merged result is what gets persisted.
"""

import argparse
import contextlib
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .autodiff import NumericsError, ShapeError, Tensor
from .geometry import angle_set, orient
from .networks import load_checkpoint, save_checkpoint
from .phantoms import (PhantomSpec, build_manifest, generate_phantom,
                       load_pairs, save_manifest, write_volume)
from .pipeline import (PipelineConfig, depth_weights, init_pipeline_params,
                       threshold)
from .radon import radon_weighted
from .training import (EvalReport, TrainConfig, _report_aggregates,
                       cross_validate, dice_score, evaluate, hausdorff,
                       save_report, train)

RUN_CONFIG_VERSION = 1
RUN_CONFIG_NAME = "run_config.json"
CHECKPOINT_NAME = "checkpoint.ckpt"
LOCK_NAME = ".lock"

_SWEEP_STREAM = 37


class CliError(Exception):
    """Failure with a stable machine-readable category."""

    def __init__(self, category, message):
        super().__init__(message)
        self.category = category


# ---- output-directory plumbing --------------------------------------------


def _prepare_out(out, force=False):
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise CliError("invalid", f"output path {out} is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    leftover = [p.name for p in out.iterdir() if p.name != LOCK_NAME]
    if leftover and not force:
        raise CliError(
            "exists",
            f"output directory {out} is not empty; pass --force to reuse")
    return out


@contextlib.contextmanager
def _output_lock(out):
    path = Path(out) / LOCK_NAME
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(
            "locked", f"{path} exists; another run is writing here") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            path.unlink()


def _write_run_config(out, command, args, pipeline=None, train_cfg=None,
                      phantom=None, extra=None):
    doc = {
        "version": RUN_CONFIG_VERSION,
        "command": command,
        "deterministic": bool(getattr(args, "deterministic", False)),
        "seed": getattr(args, "seed", None),
    }
    if pipeline is not None:
        doc["pipeline"] = asdict(pipeline)
    if train_cfg is not None:
        doc["train"] = asdict(train_cfg)
    if phantom is not None:
        doc["phantom"] = asdict(phantom)
    doc["paths"] = {k: str(v) for k, v in {
        "out": getattr(args, "out", None),
        "data": getattr(args, "data", None),
        "checkpoint": getattr(args, "checkpoint", None),
        "test_data": getattr(args, "test_data", None),
    }.items() if v is not None}
    if extra:
        doc.update(extra)
    with open(Path(out) / RUN_CONFIG_NAME, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    return doc


def _load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise CliError("invalid", f"config file {path}: {e}") from None
    if not isinstance(doc, dict):
        raise CliError("invalid", f"config file {path} must hold an object")
    return doc


def _resolve_pipeline(args, file_cfg):
    vals = dict(file_cfg.get("pipeline", {}))
    for attr, key in (("M", "M"), ("b", "bins"), ("v", "v")):
        flag = getattr(args, attr, None)
        if flag is not None:
            vals[key] = flag
    if getattr(args, "weighted", None) is not None:
        vals["weighted"] = args.weighted
    try:
        return PipelineConfig(**vals)
    except (TypeError, ValueError) as e:
        raise CliError("invalid", f"pipeline config: {e}") from None


def _resolve_train(args, file_cfg):
    vals = dict(file_cfg.get("train", {}))
    for attr in ("epochs", "minibatch", "lr", "seed"):
        flag = getattr(args, attr, None)
        if flag is not None:
            vals[attr] = flag
    stages = getattr(args, "stages", None)
    if stages is not None:
        vals["stages"] = tuple(s for s in stages.split(",") if s)
    vals.setdefault("epochs", 30)  # desk scale; full runs say --epochs 130
    try:
        return TrainConfig(**vals)
    except (TypeError, ValueError) as e:
        raise CliError("invalid", f"train config: {e}") from None


def format_mean_std(mean, std):
    """The compact aggregate form used in summaries: 0.894±0.037."""
    return f"{mean:.3f}±{std:.3f}"


# ---- phantom --------------------------------------------------------------


def cmd_phantom(args):
    spec = PhantomSpec(size=args.size, noise=args.noise,
                       confounder=args.confounder, seed=args.seed)
    out = _prepare_out(args.out, args.force)
    with _output_lock(out):
        for i in range(args.n):
            vol, mask = generate_phantom(spec, i)
            write_volume(vol, out / f"{vol.id}.vol")
            write_volume(mask, out / f"{vol.id}.mask")
        tags = {"confounder": spec.confounder, "size": spec.size,
                "noise": spec.noise}
        manifest = build_manifest(out, seed=spec.seed, tags=tags)
        save_manifest(manifest, out / "manifest.json")
        _write_run_config(out, "phantom", args, phantom=spec)
    print(f"wrote {args.n} pairs to {out}")
    return 0


# ---- train ----------------------------------------------------------------


def _load_dataset(path):
    try:
        pairs = load_pairs(path)
    except FileNotFoundError as e:
        raise CliError("io", str(e)) from None
    except ValueError as e:
        raise CliError("invalid", f"dataset {path}: {e}") from None
    if not pairs:
        raise CliError("invalid", f"dataset {path} is empty")
    return pairs


def cmd_train(args):
    file_cfg = _load_config_file(args.config)
    pcfg = _resolve_pipeline(args, file_cfg)
    tcfg = _resolve_train(args, file_cfg)
    pairs = _load_dataset(args.data)
    out = _prepare_out(args.out, args.force)
    with _output_lock(out):
        _write_run_config(out, "train", args, pipeline=pcfg, train_cfg=tcfg)
        store, log = train(pairs, pcfg, tcfg)
        save_checkpoint(store, out / CHECKPOINT_NAME)
        with open(out / "training_log.json", "w") as fh:
            json.dump(log, fh, indent=2)
            fh.write("\n")
    for stage in ("mask", "seg", "finetune"):
        hist = log.get(stage)
        if isinstance(hist, list):
            print(f"{stage}: loss {hist[0]:.4f} -> {hist[-1]:.4f} "
                  f"over {len(hist)} epochs")
        elif hist is not None:
            print(f"{stage}: {hist}")
    print(f"checkpoint: {out / CHECKPOINT_NAME}")
    return 0


# ---- eval -----------------------------------------------------------------


def _resolve_checkpoint(path):
    path = Path(path)
    if path.is_dir():
        ckpt, cfg = path / CHECKPOINT_NAME, path / RUN_CONFIG_NAME
    else:
        ckpt, cfg = path, path.parent / RUN_CONFIG_NAME
    if not ckpt.exists():
        raise CliError("io", f"no checkpoint at {ckpt}")
    if not cfg.exists():
        raise CliError("io", f"no {RUN_CONFIG_NAME} next to {ckpt}")
    with open(cfg) as fh:
        run = json.load(fh)
    if "pipeline" not in run:
        raise CliError("invalid", f"{cfg} has no pipeline section")
    try:
        pcfg = PipelineConfig(**run["pipeline"])
    except (TypeError, ValueError) as e:
        raise CliError("invalid", f"{cfg}: {e}") from None
    return ckpt, pcfg, run


def _check_store_matches(store, pcfg):
    expected = init_pipeline_params(pcfg, 0)
    bad = []
    for name in expected.names():
        if name not in store:
            bad.append(f"{name} missing")
        elif store[name].shape != expected[name].shape:
            bad.append(f"{name} {store[name].shape} != "
                       f"{expected[name].shape}")
    for name in store.names():
        if name not in expected:
            bad.append(f"{name} unexpected")
    if bad:
        raise CliError(
            "invalid", "checkpoint/config mismatch: " + "; ".join(bad))


def write_pgm(path, image):
    """8-bit binary PGM, min-max scaled; constant images come out black."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-d image, got {arr.shape}")
    lo, hi = float(arr.min()), float(arr.max())
    span = hi - lo
    scaled = np.zeros_like(arr) if span == 0 else (arr - lo) / span
    pix = np.round(scaled * 255.0).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(pix.tobytes())


def _dump_projections(out, pairs, pcfg, store):
    root = Path(out) / "projections"
    root.mkdir(exist_ok=True)
    det = store.detached()
    for x, _y, sid in pairs:
        x = np.asarray(x, dtype=np.float64)
        sdir = root / sid
        sdir.mkdir(exist_ok=True)
        for l in range(1, pcfg.v + 1):
            x_l = orient(x, l)
            angles = angle_set(x_l.shape[0], pcfg.M)
            for i, a in enumerate(angles.angles):
                q = depth_weights(pcfg, det, x_l, a)[0]
                img = radon_weighted(x_l, a, q)
                if isinstance(img, Tensor):
                    img = img.data
                write_pgm(sdir / f"l{l}_a{i:03d}.pgm", img)


def _oracle_report(pairs, pcfg, seed):
    samples = []
    for _x, y, sid in pairs:
        y4 = np.asarray(y, dtype=np.float64)
        if y4.ndim == 3:
            y4 = y4[..., None]
        pred = threshold(y4, pcfg.tau)
        dices = [dice_score(pred[..., k], y4[..., k])
                 for k in range(y4.shape[-1])]
        hds = [hausdorff(pred[..., k], y4[..., k])
               for k in range(y4.shape[-1])]
        samples.append({"id": sid, "dice": float(np.mean(dices)),
                        "hausdorff": float(max(hds)), "seconds": 0.0})
    return EvalReport(samples=tuple(samples),
                      aggregates=_report_aggregates(samples),
                      config=dict(asdict(pcfg), oracle=True), seed=seed)


def cmd_eval(args):
    ckpt, pcfg, run = _resolve_checkpoint(args.checkpoint)
    store = load_checkpoint(ckpt)
    _check_store_matches(store, pcfg)
    pairs = _load_dataset(args.data)
    out = _prepare_out(args.out, args.force)
    with _output_lock(out):
        seed = run.get("train", {}).get("seed")
        if args.oracle:
            report = _oracle_report(pairs, pcfg, seed)
        else:
            report = evaluate(pairs, pcfg, store, seed=seed)
        save_report(report, out / "report.json")
        if args.dump_projections:
            _dump_projections(out, pairs, pcfg, store)
        _write_run_config(out, "eval", args, pipeline=pcfg,
                          extra={"oracle": bool(args.oracle)})
    agg = report.aggregates
    print(f"dice {format_mean_std(agg['dice']['mean'], agg['dice']['std'])}"
          f"  median {agg['dice']['median']:.3f}")
    med_hd = agg["hausdorff"]["median"]
    inf_n = agg["hausdorff"]["infinite"]
    print(f"hausdorff median "
          f"{'n/a' if med_hd is None else format(med_hd, '.2f')}"
          f" ({inf_n} infinite)")
    print(f"seconds/volume {agg['seconds']['mean']:.2f}")
    return 0


# ---- xval -----------------------------------------------------------------


def cmd_xval(args):
    file_cfg = _load_config_file(args.config)
    pcfg = _resolve_pipeline(args, file_cfg)
    tcfg = _resolve_train(args, file_cfg)
    pairs = _load_dataset(args.data)
    if len(pairs) < args.folds:
        raise CliError(
            "invalid", f"{len(pairs)} samples cannot fill {args.folds} folds")
    out = _prepare_out(args.out, args.force)
    with _output_lock(out):
        _write_run_config(out, "xval", args, pipeline=pcfg, train_cfg=tcfg,
                          extra={"folds": args.folds})
        reports, aggregate = cross_validate(pairs, args.folds, pcfg, tcfg)
        for f, rep in enumerate(reports):
            save_report(rep, out / f"fold_{f}.json")
        save_report(aggregate, out / "aggregate.json")
    for f, rep in enumerate(reports):
        agg = rep.aggregates["dice"]
        print(f"fold {f}: dice {format_mean_std(agg['mean'], agg['std'])} "
              f"on {len(rep.samples)} samples")
    agg = aggregate.aggregates["dice"]
    print(f"aggregate: dice {format_mean_std(agg['mean'], agg['std'])}")
    return 0


# ---- sweep ----------------------------------------------------------------


def cmd_sweep(args):
    file_cfg = _load_config_file(args.config)
    pcfg = _resolve_pipeline(args, file_cfg)
    tcfg = _resolve_train(args, file_cfg)
    pairs = _load_dataset(args.data)
    try:
        sizes = sorted({int(s) for s in args.sizes.split(",") if s})
    except ValueError:
        raise CliError("invalid", f"bad --sizes {args.sizes!r}") from None
    if not sizes or sizes[0] < 1:
        raise CliError("invalid", f"bad --sizes {args.sizes!r}")

    if args.test_data is not None:
        test_pairs = _load_dataset(args.test_data)
        pool = pairs
    else:
        if args.holdout < 1 or args.holdout >= len(pairs):
            raise CliError(
                "invalid",
                f"--holdout {args.holdout} out of range for {len(pairs)}")
        pool, test_pairs = pairs[:-args.holdout], pairs[-args.holdout:]
    if sizes[-1] > len(pool):
        raise CliError(
            "invalid",
            f"largest subset {sizes[-1]} exceeds the {len(pool)} "
            f"available training samples")

    out = _prepare_out(args.out, args.force)
    with _output_lock(out):
        _write_run_config(out, "sweep", args, pipeline=pcfg, train_cfg=tcfg,
                          extra={"sizes": sizes, "holdout": len(test_pairs)})
        # one shared shuffle makes the subsets nested: each size takes a
        # prefix of the same permutation
        perm = np.random.default_rng(
            [tcfg.seed, _SWEEP_STREAM]).permutation(len(pool))
        by_size, subsets = {}, {}
        for size in sizes:
            subset = [pool[i] for i in perm[:size]]
            subsets[str(size)] = [sid for _x, _y, sid in subset]
            store, _log = train(subset, pcfg, tcfg)
            rep = evaluate(test_pairs, pcfg, store, seed=tcfg.seed)
            save_report(rep, out / f"report_n{size}.json")
            by_size[str(size)] = rep.aggregates
        with open(out / "sweep.json", "w") as fh:
            json.dump({"version": RUN_CONFIG_VERSION, "sizes": by_size,
                       "subsets": subsets},
                      fh, indent=2, allow_nan=False)
            fh.write("\n")
    for size in sizes:
        agg = by_size[str(size)]["dice"]
        print(f"n={size}: dice {format_mean_std(agg['mean'], agg['std'])} "
              f"median {agg['median']:.3f}")
    return 0


# ---- parser and dispatch --------------------------------------------------


def _add_common_train_flags(p):
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--data", required=True, help="dataset manifest or dir")
    p.add_argument("--epochs", type=int, help="epochs per stage (default 30)")
    p.add_argument("--minibatch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--M", type=float, help="angle spacing factor")
    p.add_argument("--b", type=int, help="bin count")
    p.add_argument("--v", type=int, help="orientation count (1-3)")
    p.add_argument("--weighted", dest="weighted", action="store_true",
                   default=None, help="depth-weighted projections (default)")
    p.add_argument("--unweighted", dest="weighted", action="store_false",
                   help="flat projection weights; skips the mask stage")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true",
                   help="record that this run must be bit-reproducible")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true",
                   help="write into a non-empty output directory")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="projseg",
        description="projection-space volumetric segmentation")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=30)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--confounder", action="store_true")
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="run the staged training recipe")
    _add_common_train_flags(p)
    p.add_argument("--stages",
                   help="comma list out of mask,seg,finetune (default all)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True,
                   help="training output dir or checkpoint file")
    p.add_argument("--data", required=True)
    p.add_argument("--dump-projections", action="store_true",
                   help="write per-angle PGM images of what the nets see")
    p.add_argument("--oracle", action="store_true",
                   help="sanity path: score the masks against themselves")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("xval", help="k-fold cross-validation")
    _add_common_train_flags(p)
    p.add_argument("--stages")
    p.add_argument("--folds", type=int, default=3)
    p.set_defaults(func=cmd_xval)

    p = sub.add_parser("sweep", help="data-efficiency sweep over subsets")
    _add_common_train_flags(p)
    p.add_argument("--stages")
    p.add_argument("--sizes", default="6,15,24",
                   help="comma list of nested training-set sizes")
    p.add_argument("--holdout", type=int, default=10,
                   help="reserve this many trailing samples for testing")
    p.add_argument("--test-data", dest="test_data",
                   help="separate evaluation manifest (overrides --holdout)")
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(json.dumps({"error": e.category, "message": str(e)}),
              file=sys.stderr)
        return 1
    except NumericsError as e:
        print(json.dumps({"error": "numerics", "message": str(e)}),
              file=sys.stderr)
        return 1
    except (ShapeError, ValueError, TypeError) as e:
        print(json.dumps({"error": "invalid", "message": str(e)}),
              file=sys.stderr)
        return 1
    except OSError as e:
        print(json.dumps({"error": "io", "message": str(e)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
