"""Ablation matrix: entanglement-signal and alignment variants under equal budgets."""

from __future__ import annotations

import copy
import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from regdesk import plots
from regdesk.checkpoint import load_checkpoint
from regdesk.config import RunConfig
from regdesk.metrics import eval_run, real_feature_moments
from regdesk.train import run_training

log = logging.getLogger(__name__)

# cell -> (cls_variant, alignment on?)
CELLS: dict[str, tuple[str, bool]] = {
    "reg": ("teacher_cls", True),
    "repa_only": ("none", True),
    "sit_baseline": ("none", False),
    "olt": ("learnable_token", True),
    "entangle_only": ("teacher_cls", False),
    "avg_teacher_feature": ("avg_teacher_feature", True),
    "avg_latent_feature": ("avg_latent_feature", True),
}


@dataclass
class CellResult:
    cell: str
    seed: int
    mean_frechet: float
    cls_cosine: float
    cknna_align: float
    final_loss_total: float


def cell_config(base: RunConfig, cell: str, seed: int) -> RunConfig:
    variant, aligned = CELLS[cell]
    rc = copy.deepcopy(base)
    rc.run_name = f"{cell}-s{seed}"
    rc.net.cls_variant = variant
    rc.train.loss_weights.lam = base.train.loss_weights.lam if aligned else 0.0
    rc.train.seed = seed
    rc.sampler.seed = seed
    rc.__post_init__()
    return rc


def _last_loss(csv_path: Path) -> float:
    with open(csv_path) as fh:
        rows = list(csv.reader(fh))[1:]
    return float(rows[-1][4]) if rows else float("nan")


def run_cell(base: RunConfig, cell: str, seed: int, root: Path) -> CellResult:
    torch.set_num_threads(1)
    rc = cell_config(base, cell, seed)
    cell_dir = rc.run_dir(root)
    done = cell_dir / "cell_result.json"
    if done.exists():
        return CellResult(**json.loads(done.read_text()))
    mixture, teacher, sched = rc.build_mixture(), rc.build_teacher(), rc.build_schedule()
    ckpt = run_training(mixture, teacher, rc.net, rc.train, sched, cell_dir, extra={"config_hash": rc.config_hash()})
    state, _, _ = load_checkpoint(ckpt)
    ev = rc.eval
    rep = eval_run(
        state, mixture, teacher, rc.sampler, sched,
        n_per_class=ev["n_per_class"], k=ev["k"], n_cknna=ev["n_cknna"],
        config_hash=rc.config_hash(), real_moments=real_feature_moments(mixture, teacher),
    )
    rep.write(cell_dir / "eval")
    res = CellResult(
        cell=cell,
        seed=seed,
        mean_frechet=rep.mean_frechet,
        cls_cosine=rep.cls_cosine_mean,
        cknna_align=rep.cknna_by_layer[rc.net.align_depth - 1],
        final_loss_total=_last_loss(cell_dir / "metrics.csv"),
    )
    done.write_text(json.dumps(res.__dict__, sort_keys=True))
    return res


def _median(vals):
    vals = [v for v in vals if np.isfinite(v)]
    return float(np.median(vals)) if vals else float("nan")


def summarize(results: list[CellResult]) -> list[dict]:
    """Median per cell, ranked by median Frechet distance (best first)."""
    rows = []
    for cell in CELLS:
        mine = [r for r in results if r.cell == cell]
        if not mine:
            continue
        rows.append(
            {
                "cell": cell,
                "seeds": len(mine),
                "median_frechet": _median([r.mean_frechet for r in mine]),
                "median_cls_cosine": _median([r.cls_cosine for r in mine]),
                "median_cknna_align": _median([r.cknna_align for r in mine]),
            }
        )
    rows.sort(key=lambda r: (r["median_frechet"], r["cell"]))
    for rank, r in enumerate(rows, start=1):
        r["rank"] = rank
    return rows


def run_ablation(base: RunConfig, seeds: list[int], root, workers: int | None = None, cells=None) -> tuple[list[CellResult], list[dict]]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    jobs = [(c, s) for c in (cells or CELLS) for s in seeds]
    workers = workers or os.cpu_count() or 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = {job: ex.submit(run_cell, base, job[0], job[1], root) for job in jobs}
            results = [futs[job].result() for job in jobs]
    else:
        results = []
        for c, s in jobs:
            log.info("ablation cell %s seed %d", c, s)
            results.append(run_cell(base, c, s, root))
    results.sort(key=lambda r: (list(CELLS).index(r.cell), r.seed))
    summary = summarize(results)

    with open(root / "ablation_results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", "seed", "mean_frechet", "cls_cosine", "cknna_align", "final_loss_total"])
        for r in results:
            w.writerow([r.cell, r.seed, repr(r.mean_frechet), repr(r.cls_cosine), repr(r.cknna_align), repr(r.final_loss_total)])
    with open(root / "ablation_summary.csv", "w", newline="") as fh:
        keys = ["rank", "cell", "seeds", "median_frechet", "median_cls_cosine", "median_cknna_align"]
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in summary:
            w.writerow({k: r[k] for k in keys})
    plots.bars(
        [r["cell"] for r in summary],
        [r["median_frechet"] for r in summary],
        root / "ablation_frechet.svg",
        ylabel="median per-class Frechet",
        title="ablation (lower is better)",
    )
    return results, summary
