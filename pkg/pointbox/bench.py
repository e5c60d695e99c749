# bench.py
"""
Fraction sweep over (variant, fraction, seed) cells.

Every finished cell appends one JSON line to `results.jsonl`; a re-run
reads that log first and only executes cells without an `ok` record, so an
interrupted sweep picks up where it stopped. Failures are recorded and the
sweep moves on.
"""
import itertools
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import pandas as pd

from .config import RunConfig, validate_run_config
from .pipeline import run_cell

logger = logging.getLogger(__name__)

RESULTS_FILE = "results.jsonl"
COLUMNS = ["variant", "fraction", "seed", "teacher_map", "student_map", "wall_time", "status", "error"]


@dataclass
class BenchmarkResult:
    records: List[dict] = field(default_factory=list)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.records, columns=COLUMNS)

    def ok(self):
        return [r for r in self.records if r["status"] == "ok"]

    def failed(self):
        return [r for r in self.records if r["status"] != "ok"]


# --- UTILS ---

def _cell_key(variant, fraction, seed):
    return f"{variant}|{float(fraction):g}|{int(seed)}"


def _cell_dir(out_dir, variant, fraction, seed):
    return Path(out_dir) / "cells" / f"{variant}_f{float(fraction):g}_s{int(seed)}"


def read_records(path):
    """Latest record per cell from an append-only log; torn trailing lines are ignored."""
    path = Path(path)
    latest = {}
    if not path.is_file():
        return latest
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                logger.warning("%s:%d: unreadable record skipped", path, n)
                continue
            latest[_cell_key(rec["variant"], rec["fraction"], rec["seed"])] = rec
    return latest


def append_record(path, record):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # one write per line keeps concurrent appenders from interleaving
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")
        f.flush()
        os.fsync(f.fileno())


# --- CELLS ---

def plan_cells(fractions, seeds, variants):
    """Cartesian product in (variant, fraction, seed) order."""
    return [(v, float(f), int(s)) for v, f, s in itertools.product(variants, fractions, seeds)]


def cell_config(cfg: RunConfig, variant, fraction, seed) -> RunConfig:
    doc = cfg.model_dump(mode="json")
    doc.update(variant=variant, fraction=fraction, seed=seed)
    return validate_run_config(doc)


def _run_job(job):
    """Worker entry point; never raises."""
    cfg_doc, cell_dir = job
    cfg = validate_run_config(cfg_doc)
    start = time.perf_counter()
    try:
        record = run_cell(cfg, cell_dir)
        record["error"] = None
        return record
    except Exception as e:
        logger.debug("cell failed:\n%s", traceback.format_exc())
        return {
            "variant": cfg.variant,
            "fraction": cfg.fraction,
            "seed": cfg.seed,
            "teacher_map": None,
            "student_map": None,
            "wall_time": time.perf_counter() - start,
            "status": "failed",
            "error": f"{type(e).__name__}: {e}",
        }


# --- MAIN RUNNER ---

def run_benchmark(cfg: RunConfig, out_dir, fractions=None, seeds=None, variants=None, workers=None,
                  dry_run=False) -> BenchmarkResult:
    """
    Run every planned cell not already finished under `out_dir`. Returns the
    records for the planned cells (ok or failed), in plan order.
    """
    fractions = fractions if fractions is not None else cfg.bench.fractions
    seeds = seeds if seeds is not None else cfg.bench.seeds
    variants = variants if variants is not None else cfg.bench.variants
    workers = workers if workers is not None else cfg.bench.workers
    cells = plan_cells(fractions, seeds, variants)
    out = Path(out_dir)
    log_path = out / RESULTS_FILE

    done = read_records(log_path)
    todo = [c for c in cells if done.get(_cell_key(*c), {}).get("status") != "ok"]
    logger.info("bench: %d cells planned, %d already done, %d to run", len(cells), len(cells) - len(todo), len(todo))
    if dry_run:
        return BenchmarkResult([done[_cell_key(*c)] for c in cells if _cell_key(*c) in done])

    # cells run without progress bars; the sweep itself is the unit of progress
    jobs = [
        (cell_config(cfg, v, f, s).model_copy(update={"progress": False}).model_dump(mode="json"),
         str(_cell_dir(out, v, f, s)))
        for v, f, s in todo
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_job, j) for j in jobs]
            for fut in as_completed(futures):
                _record(log_path, fut.result(), done)
    else:
        for j in jobs:
            _record(log_path, _run_job(j), done)

    result = BenchmarkResult([done[_cell_key(*c)] for c in cells])
    if result.failed():
        logger.warning("bench: %d of %d cells failed", len(result.failed()), len(cells))
    return result


def _record(log_path, record, done):
    append_record(log_path, record)
    done[_cell_key(record["variant"], record["fraction"], record["seed"])] = record
    if record["status"] == "ok":
        logger.info("bench: %s f=%g seed=%d done in %.1fs", record["variant"], record["fraction"],
                    record["seed"], record["wall_time"])
    else:
        logger.warning("bench: %s f=%g seed=%d failed: %s", record["variant"], record["fraction"],
                       record["seed"], record["error"])


def load_result(out_dir) -> BenchmarkResult:
    return BenchmarkResult(list(read_records(Path(out_dir) / RESULTS_FILE).values()))
