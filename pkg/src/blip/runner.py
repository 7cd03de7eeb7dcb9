"""Run every seed of a config, or one config per prior value, and write the summaries."""

from __future__ import annotations

import copy
import functools
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from threadpoolctl import threadpool_limits

from blip.config import RunConfig
from blip.engine import RunFailed, run_continual
from blip.metrics import dumps, mean_std, serialize_report
from blip.tasks import (
    TaskStream,
    build_gaussian_stream,
    build_permuted_stream,
    build_split_stream,
    load_mnist,
)

log = logging.getLogger("blip")


@functools.lru_cache(maxsize=2)
def _mnist(mnist_dir: str):
    return load_mnist(mnist_dir)


def build_stream(config: RunConfig, seed: int) -> TaskStream:
    s = config.stream
    if s.name == "gaussian":
        return build_gaussian_stream(s.num_tasks, s.classes, s.dim, s.samples_per_class, s.separation, seed)
    (images, labels), test = _mnist(str(s.mnist_dir))
    if s.name == "split_mnist":
        return build_split_stream(images, labels, s.classes_per_task, seed, test=test,
                                  val_fraction=s.val_fraction)
    return build_permuted_stream(images, labels, s.num_tasks, seed, test=test, val_fraction=s.val_fraction)


def seed_dir(out_dir, seed: int) -> Path:
    return Path(out_dir) / f"seed_{seed}"


def run_seed(config: RunConfig, seed: int, out_dir) -> dict:
    """One deterministic run; the report is written even when the run fails."""
    with threadpool_limits(limits=1):
        stream = build_stream(config, seed)
        try:
            report = run_continual(stream, config, seed)
        except RunFailed as exc:
            serialize_report(exc.report, seed_dir(out_dir, seed))
            return {"seed": seed, "status": "failed", "error": str(exc)}
    serialize_report(report, seed_dir(out_dir, seed))
    return {"seed": seed, "status": "complete", "acc": report.acc, "bwt": report.bwt}


def worker_count() -> int:
    raw = os.environ.get("BLIP_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"BLIP_THREADS must be an integer, got {raw!r}") from None


def run_seeds(config: RunConfig, out_dir=None) -> dict:
    """Run every seed of ``config`` and write ``summary.json`` next to the seed directories."""
    out_dir = Path(out_dir or config.out_dir)
    workers = min(worker_count(), len(config.seeds))
    if workers == 1:
        results = [run_seed(config, seed, out_dir) for seed in config.seeds]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_seed, config, seed, out_dir) for seed in config.seeds]
            results = [f.result() for f in futures]
    done = [r for r in results if r["status"] == "complete"]
    summary = {"runs": results, "failed": len(results) - len(done)}
    if done:
        summary["acc_mean"], summary["acc_std"] = mean_std([r["acc"] for r in done])
        summary["bwt_mean"], summary["bwt_std"] = mean_std([r["bwt"] for r in done])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "summary.json").write_text(dumps(summary) + "\n", encoding="utf-8")
    return summary


def sweep_f0(config: RunConfig, f0_values) -> list[dict]:
    """Run the full seed list once per prior Fisher value; writes ``f0_sweep.csv``."""
    out_dir = Path(config.out_dir)
    rows = []
    for f0 in f0_values:
        cfg = copy.deepcopy(config)
        cfg.blip.f0 = float(f0)
        summary = run_seeds(cfg, out_dir / f"f0_{f0:g}")
        rows.append({"f0": float(f0), **{k: summary.get(k) for k in ("acc_mean", "acc_std", "bwt_mean", "bwt_std")},
                     "failed": summary["failed"]})
    lines = ["f0,acc_mean,acc_std,bwt_mean,bwt_std"]
    for row in rows:
        cells = [row["f0"], row["acc_mean"], row["acc_std"], row["bwt_mean"], row["bwt_std"]]
        lines.append(",".join("" if v is None else format(v, ".17g") for v in cells))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "f0_sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows
