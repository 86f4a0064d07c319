"""Ablation studies as reusable functions.

Each study trains one model per (sweep value, seed), caches the run under
``workdir/runs/<key>`` and returns long-format rows
``(sweep_value, seed, metric, value)``. Runs with identical configs (the
baseline in particular) are trained once and shared between studies.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .config import format_config, with_overrides
from .data import Dataset
from .engine import LOG_FIELDS, TrainConfig, attenuate_eval, class_change_rate, evaluate, train
from .model import FactorizedModel, load_checkpoint
from .taf import ChangeRateSchedule, TAFConfig

__all__ = [
    "Row",
    "RunStore",
    "change_rate_study",
    "context_study",
    "swap_curve_study",
    "attenuate_study",
    "class_rate_study",
    "STUDIES",
    "DEFAULT_SWEEPS",
]

DEFAULT_SWEEPS = {
    "change-rate": [0.0, 1e-5, 1e-4, 1e-3, 1e-2, math.inf],
    "context": [1, 3, 7, 15, 30],
    "swap-curve": list(range(-15, 16)),
    "attenuate": [1],
    "class-rate": [0, 1, 2, 5, 10, 15],
}

# studies that compare accuracy across sweep points need several seeds
MIN_SEEDS = {"change-rate": 3, "context": 3, "swap-curve": 3, "attenuate": 1, "class-rate": 1}


@dataclass(frozen=True)
class Row:
    sweep_value: float
    seed: int
    metric: str
    value: float


def run_key(cfg: TrainConfig) -> str:
    return hashlib.sha256(format_config(cfg).encode()).hexdigest()[:16]


def canonical(cfg: TrainConfig) -> TrainConfig:
    """Collapse configs that train identically onto the baseline form."""
    if not cfg.regularized:
        # TAF fields do not influence an unregularized run
        off = ChangeRateSchedule((math.inf,) * cfg.taf.schedule.m)
        return replace(cfg, mode="baseline", taf=TAFConfig(lam=0.0, schedule=off), protocol="matched_epochs")
    return cfg


class RunStore:
    """Content-addressed cache of trained runs under ``root``."""

    def __init__(self, root, train_ds: Dataset, val_ds: Dataset | None, jobs: int = 1):
        self.root = os.fspath(root)
        self.train_ds, self.val_ds = train_ds, val_ds
        self.jobs = max(1, jobs)
        self.used: set[str] = set()  # run keys touched through this store

    def path(self, cfg: TrainConfig) -> str:
        return os.path.join(self.root, "runs", run_key(canonical(cfg)))

    def has(self, cfg: TrainConfig) -> bool:
        return os.path.exists(os.path.join(self.path(cfg), "done"))

    def ensure(self, cfgs) -> None:
        todo, seen = [], set()
        for cfg in map(canonical, cfgs):
            key = run_key(cfg)
            self.used.add(key)
            if key not in seen and not self.has(cfg):
                seen.add(key)
                todo.append(cfg)
        if self.jobs == 1 or len(todo) <= 1:
            for cfg in todo:
                _train_one(cfg, self.train_ds, self.val_ds, self.path(cfg))
        else:
            with ProcessPoolExecutor(self.jobs) as pool:
                futs = [pool.submit(_train_one, cfg, self.train_ds, self.val_ds, self.path(cfg)) for cfg in todo]
                for f in futs:
                    f.result()

    def model(self, cfg: TrainConfig, which: str = "final") -> FactorizedModel:
        self.ensure([cfg])
        return load_checkpoint(os.path.join(self.path(cfg), which))

    def summary(self, cfg: TrainConfig) -> dict:
        self.ensure([cfg])
        with open(os.path.join(self.path(cfg), "summary.json"), encoding="utf-8") as fh:
            return json.load(fh)


def write_log(log, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(LOG_FIELDS) + "\n")
        for r in log:
            fh.write(",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in LOG_FIELDS) + "\n")


def _train_one(cfg: TrainConfig, train_ds: Dataset, val_ds: Dataset | None, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))
    res = train(cfg, train_ds, val_ds, checkpoint_dir=path)
    write_log(res.log, os.path.join(path, "log.csv"))
    summary = {"best_miou": res.best_miou, "val_history": res.val_history}
    with open(os.path.join(path, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh)
    open(os.path.join(path, "done"), "w").close()


def _check_seeds(kind: str, seeds) -> None:
    if len(seeds) < MIN_SEEDS[kind]:
        raise ValueError(f"{kind} compares accuracy across runs and needs >= {MIN_SEEDS[kind]} seeds")


def _metric_rows(value, seed, prefix, metrics) -> list[Row]:
    rows = [Row(value, seed, f"{prefix}miou", metrics.miou), Row(value, seed, f"{prefix}pixel_acc", metrics.pixel_acc)]
    rows += [Row(value, seed, f"{prefix}iou_{k}", float(v)) for k, v in enumerate(metrics.per_class_iou)]
    return rows


def change_rate_study(store: RunStore, base: TrainConfig, seeds, values=None) -> list[Row]:
    """Sweep c_1 (the other rates stay as configured); ``inf`` is the baseline."""
    _check_seeds("change-rate", seeds)
    values = DEFAULT_SWEEPS["change-rate"] if values is None else values
    rest = base.taf.schedule.rates[1:]
    grid = {}
    for c in values:
        rates = (float(c),) + tuple(max(r, float(c)) for r in rest)
        for s in seeds:
            grid[c, s] = with_overrides(base, seed=s, mode="taf", taf_schedule=ChangeRateSchedule(rates))
    store.ensure(grid.values())
    rows = []
    for (c, s), cfg in grid.items():
        rows += _metric_rows(c, s, "", evaluate(store.model(cfg), store.val_ds))
    return rows


def context_study(store: RunStore, base: TrainConfig, seeds, values=None) -> list[Row]:
    _check_seeds("context", seeds)
    values = DEFAULT_SWEEPS["context"] if values is None else values
    grid = {(n, s): with_overrides(base, seed=s, mode="taf", taf_n_h=int(n)) for n in values for s in seeds}
    store.ensure(grid.values())
    rows = []
    for (n, s), cfg in grid.items():
        rows += _metric_rows(n, s, "", evaluate(store.model(cfg), store.val_ds))
    return rows


def swap_curve_study(store: RunStore, base: TrainConfig, seeds, values=None, branch: int = 1) -> list[Row]:
    """mIOU with branch ``branch`` taken from ``key + delta``, baseline vs TAF, train and val splits."""
    _check_seeds("swap-curve", seeds)
    values = DEFAULT_SWEEPS["swap-curve"] if values is None else values
    grid = {}
    for s in seeds:
        grid["taf", s] = with_overrides(base, seed=s, mode="taf")
        grid["baseline", s] = with_overrides(base, seed=s, mode="baseline")
    store.ensure(grid.values())
    rows = []
    for (mode, s), cfg in grid.items():
        model = store.model(cfg)
        for split, ds in (("train", store.train_ds), ("val", store.val_ds)):
            for d in values:
                m = evaluate(model, ds, swap_spec=(branch, int(d)))
                rows.append(Row(d, s, f"{mode}/{split}/miou", m.miou))
    return rows


def attenuate_study(store: RunStore, base: TrainConfig, seeds, values=None) -> list[Row]:
    """Per-class IOU change when a branch of the TAF model is zeroed or replaced by its mean."""
    _check_seeds("attenuate", seeds)
    values = DEFAULT_SWEEPS["attenuate"] if values is None else values
    cfgs = {s: with_overrides(base, seed=s, mode="taf") for s in seeds}
    store.ensure(cfgs.values())
    rows = []
    for s, cfg in cfgs.items():
        model = store.model(cfg)
        for i in values:
            for mode in ("zeros", "sample_mean"):
                deltas = attenuate_eval(model, store.val_ds, int(i), mode)
                rows += [Row(i, s, f"{mode}/iou_delta_{k}", float(v)) for k, v in enumerate(deltas)]
    return rows


def class_rate_study(store: RunStore, base: TrainConfig, seeds, values=None, gt: bool = False) -> list[Row]:
    """Per-class normalized IOU against offset; ``gt=True`` scores the synthetic ground truth."""
    values = [int(d) for d in (DEFAULT_SWEEPS["class-rate"] if values is None else values)]
    if gt:
        curves = class_change_rate(None, store.val_ds, values)
        return [Row(d, -1, f"gt/class_{k}", float(v)) for d in values for k, v in enumerate(curves[d])]
    _check_seeds("class-rate", seeds)
    cfgs = {s: with_overrides(base, seed=s) for s in seeds}
    store.ensure(cfgs.values())
    rows = []
    for s, cfg in cfgs.items():
        curves = class_change_rate(store.model(cfg), store.val_ds, values)
        rows += [Row(d, s, f"{cfg.mode}/class_{k}", float(v)) for d in values for k, v in enumerate(curves[d])]
    return rows


STUDIES = {
    "change-rate": change_rate_study,
    "context": context_study,
    "swap-curve": swap_curve_study,
    "attenuate": attenuate_study,
    "class-rate": class_rate_study,
}


def summarize(rows) -> list[tuple]:
    """``(sweep_value, metric, mean, std, n, min, max)`` per group; NaN values are skipped."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r.sweep_value, r.metric), []).append(r.value)
    out = []
    for (v, metric), vals in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        a = np.array([x for x in vals if not math.isnan(x)])
        if a.size:
            out.append((v, metric, float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0,
                        int(a.size), float(a.min()), float(a.max())))
        else:
            out.append((v, metric, math.nan, math.nan, 0, math.nan, math.nan))
    return out
