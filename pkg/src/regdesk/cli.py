"""Command-line entry point: ``regdesk {train,sample,eval,flops,ablate}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from regdesk import plots
from regdesk.checkpoint import load_checkpoint
from regdesk.config import RunConfig, load_config
from regdesk.metrics import FlopsShape, eval_run, flops_report
from regdesk.sample import sample
from regdesk.train import CSV_HEADER, run_training

log = logging.getLogger("regdesk")


def _setup(args) -> tuple[RunConfig, Path]:
    rc = load_config(args.config)
    if args.seed is not None:
        rc.train.seed = args.seed
        rc.sampler.seed = args.seed
    run_dir = rc.run_dir(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    rc.dump(run_dir / "config.yaml")
    return rc, run_dir


def _read_metrics(path: Path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    if rows[0] != CSV_HEADER:
        raise ValueError(f"{path}: unexpected metrics header {rows[0]}")
    body = [[float(v) for v in r] for r in rows[1:]]
    return [int(r[0]) for r in body], {name: [r[i] for r in body] for i, name in enumerate(CSV_HEADER) if i}


def cmd_train(args) -> int:
    rc, run_dir = _setup(args)
    ckpt = run_training(
        rc.build_mixture(), rc.build_teacher(), rc.net, rc.train, rc.build_schedule(), run_dir,
        resume_from=args.resume, extra={"config_hash": rc.config_hash()}, progress=not args.quiet,
    )
    steps, cols = _read_metrics(run_dir / "metrics.csv")
    keep = {k: cols[k] for k in ("loss_pred_z", "loss_pred_cls", "loss_repa", "loss_total")}
    plots.loss_curves(keep, steps, run_dir / "loss_curve.svg")
    print(f"checkpoint,{ckpt}")
    print(f"metrics,{run_dir / 'metrics.csv'}")
    return 0


def write_sample_dump(path: Path, z: np.ndarray, cls: np.ndarray | None, labels, seed: int, config_hash: str) -> Path:
    """``<name>.f64`` holds z then cls as float64 LE; ``<name>.manifest.txt`` describes it."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(z, dtype="<f8").tobytes())
        if cls is not None:
            fh.write(np.ascontiguousarray(cls, dtype="<f8").tobytes())
    lines = [
        "format: float64-le",
        f"config_hash: {config_hash}",
        f"seed: {seed}",
        f"z_shape: {','.join(map(str, z.shape))}",
        f"cls_shape: {','.join(map(str, cls.shape)) if cls is not None else 'none'}",
        f"labels: {','.join(str(int(v)) for v in labels)}",
    ]
    path.with_suffix(".manifest.txt").write_text("\n".join(lines) + "\n")
    return path


def read_sample_dump(path) -> dict:
    path = Path(path)
    meta = dict(line.split(": ", 1) for line in path.with_suffix(".manifest.txt").read_text().splitlines())
    raw = np.fromfile(path, dtype="<f8")
    zs = tuple(int(v) for v in meta["z_shape"].split(","))
    nz = int(np.prod(zs))
    out = {"z": raw[:nz].reshape(zs), "cls": None, "seed": int(meta["seed"]), "config_hash": meta["config_hash"]}
    if meta["cls_shape"] != "none":
        cs = tuple(int(v) for v in meta["cls_shape"].split(","))
        out["cls"] = raw[nz:].reshape(cs)
    out["labels"] = np.array([int(v) for v in meta["labels"].split(",")])
    return out


def cmd_sample(args) -> int:
    rc, run_dir = _setup(args)
    state, _, _ = load_checkpoint(args.checkpoint)
    n_cls = rc.net.num_classes
    labels = np.full(args.count, args.label) if args.label is not None else np.arange(args.count) % n_cls
    res = sample(state.ema_model(), labels, rc.sampler, rc.build_schedule())
    z = res.z_final
    dump = write_sample_dump(run_dir / "samples" / "samples.f64", z, res.cls_final, labels, rc.sampler.seed, rc.config_hash())
    flat = z.reshape(len(labels), -1)
    plots.scatter_by_label(flat[:, :2], labels, run_dir / "samples" / "scatter.svg")
    print(f"samples,{dump}")
    return 0


def cmd_eval(args) -> int:
    rc, run_dir = _setup(args)
    state, _, _ = load_checkpoint(args.checkpoint)
    ev = rc.eval
    rep = eval_run(
        state, rc.build_mixture(), rc.build_teacher(), rc.sampler, rc.build_schedule(),
        n_per_class=ev["n_per_class"], k=ev["k"], n_cknna=ev["n_cknna"], config_hash=rc.config_hash(),
    )
    out = run_dir / "eval"
    rep.write(out)
    n = rc.net.align_depth
    layers = list(range(1, len(rep.cknna_by_layer) + 1))
    plots.line(layers, rep.cknna_by_layer, out / "cknna_by_layer.svg", "block", "CKNNA", "CKNNA by layer (t=0.5)", mark_x=n)
    ts = [float(t) for t in rep.cknna_by_t]
    plots.line(ts, list(rep.cknna_by_t.values()), out / "cknna_by_t.svg", "t", "CKNNA", f"CKNNA by t (block {n})")
    print("metric,value")
    print(f"mean_frechet,{rep.mean_frechet!r}")
    print(f"cls_cosine_mean,{rep.cls_cosine_mean!r}")
    for i, v in enumerate(rep.cknna_by_layer, start=1):
        print(f"cknna_layer_{i},{v!r}")
    return 0


def cmd_flops(args) -> int:
    rc = load_config(args.config)
    print("config,flops_with_cls,flops_without_cls,delta_pct")
    for name, shape in (("desk", FlopsShape.from_net(rc.net)), ("xl", FlopsShape.xl())):
        r = flops_report(shape, with_cls=True)
        print(f"{name},{r.flops},{r.baseline_flops},{r.delta_pct:.4f}")
    return 0


def cmd_ablate(args) -> int:
    from regdesk.ablate import run_ablation

    rc, run_dir = _setup(args)
    seeds = list(range(args.seeds))
    _, summary = run_ablation(rc, seeds, run_dir / "ablation", workers=args.workers)
    print("rank,cell,seeds,median_frechet,median_cls_cosine,median_cknna_align")
    for r in summary:
        print(f"{r['rank']},{r['cell']},{r['seeds']},{r['median_frechet']!r},{r['median_cls_cosine']!r},{r['median_cknna_align']!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run config (YAML)")
    common.add_argument("--out", default=None, help="output root (default: config output_dir)")
    common.add_argument("--seed", type=int, default=None, help="override train and sampler seeds")
    common.add_argument("--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="regdesk", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", parents=[common], help="train a denoiser")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)
    s = sub.add_parser("sample", parents=[common], help="draw samples from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--label", type=int, default=None)
    s.add_argument("--count", type=int, default=256)
    s.set_defaults(func=cmd_sample)
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.set_defaults(func=cmd_eval)
    f = sub.add_parser("flops", parents=[common], help="FLOPs of the extra class token")
    f.set_defaults(func=cmd_flops)
    a = sub.add_parser("ablate", parents=[common], help="run the ablation matrix")
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--workers", type=int, default=None)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except Exception as exc:  # single-line, machine-parsable failure report
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
