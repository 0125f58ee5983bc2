"""Dice scoring, k-fold cross-validation and the corrupted-subset sweep."""

import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import network, training
from .errors import ConfigError, ShapeError
from .synthdata import corrupt_dataset, derive_seed, load_samples

log = logging.getLogger(__name__)

THRESHOLD = 0.5
POWER_GRID = (1.0, 1.5, 2.0)
MODELS = ("moi1", "moi2")
BASELINE = "none"
# bumped whenever a change alters trained weights, so stale persisted runs are recomputed
NUMERICS_VERSION = 1


def dsc(pred, truth):
    """Dice coefficient of two binary masks; two empty masks score 1."""
    p = np.asarray(pred) > 0
    g = np.asarray(truth) > 0
    if p.shape != g.shape:
        raise ShapeError(f"dsc: shapes differ {p.shape} vs {g.shape}")
    total = int(np.count_nonzero(p)) + int(np.count_nonzero(g))
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(p & g)) / total


def binarize(probs, threshold=THRESHOLD):
    return (np.asarray(probs) >= threshold).astype(np.uint8)


def config_fingerprint(config):
    """sha256 of the sorted ``key=value`` serialization of a flat mapping."""
    text = "\n".join(f"{k}={config[k]!r}" for k in sorted(config))
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class FoldReport:
    fold_id: int
    dscs: list
    mean_dsc: float
    config_fingerprint: str
    final_loss: float = None

    @classmethod
    def from_scores(cls, fold_id, dscs, fingerprint, final_loss=None):
        dscs = [float(d) for d in dscs]
        mean = float(np.mean(dscs)) if dscs else None
        return cls(fold_id, dscs, mean, fingerprint, None if final_loss is None else float(final_loss))

    def to_json(self):
        return json.dumps(self.__dict__, sort_keys=True, allow_nan=False)


def kfold_split(manifest, k_folds=5, seed=0):
    """Shuffled partition into ``k_folds`` near-equal test folds.

    Returns ``[(train_manifest, test_manifest), ...]``; each record lands in
    exactly one test fold.
    """
    n = len(manifest.records)
    if k_folds < 2:
        raise ConfigError(f"need at least 2 folds, got {k_folds}")
    if n < k_folds:
        raise ConfigError(f"{n} records cannot fill {k_folds} folds")
    perm = np.random.default_rng(derive_seed(seed, "folds")).permutation(n)
    out = []
    for fold in np.array_split(perm, k_folds):
        test_pos = set(int(i) for i in fold)
        train = [r for i, r in enumerate(manifest.records) if i not in test_pos]
        test = [r for i, r in enumerate(manifest.records) if i in test_pos]
        out.append((replace(manifest, records=train), replace(manifest, records=test)))
    return out


def score_samples(net_cfg, ps, samples):
    """Per-sample DSC of thresholded EMA predictions against accurate masks only."""
    scored = [s for s in samples if not s.inaccurate]
    if not scored:
        return []
    probs = training.predict(net_cfg, ps, np.stack([s.image for s in scored]))
    return [dsc(binarize(p), s.mask) for p, s in zip(probs, scored)]


def evaluate_checkpoint(path, manifest, fold_id=0):
    """Score a saved checkpoint on a manifest."""
    ps, net_cfg = network.load_params(path)
    samples = load_samples(manifest)
    with open(path, "rb") as f:
        fp = hashlib.sha256(f.read()).hexdigest()
    return FoldReport.from_scores(fold_id, score_samples(net_cfg, ps, samples), fp)


def run_fold(train_samples, test_samples, net_cfg, train_cfg, fold_id=0, fingerprint=""):
    ps, logs = training.train(train_samples, net_cfg, train_cfg)
    scores = score_samples(net_cfg, ps, test_samples)
    return FoldReport.from_scores(fold_id, scores, fingerprint, logs[-1].loss if logs else None)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    model: str
    n: float
    mean_dsc: float
    std_dsc: float
    improvement_pct: float
    runs: int


@dataclass
class SweepReport:
    rows: list = field(default_factory=list)
    std_scope: str = "pooled over subset x fold x seed runs"

    def baseline(self):
        for r in self.rows:
            if r.model == BASELINE:
                return r
        return None

    def best(self):
        cand = [r for r in self.rows if r.model != BASELINE]
        return max(cand, key=lambda r: r.mean_dsc) if cand else None

    def to_csv(self):
        lines = ["model,n,mean_dsc,std_dsc,improvement_pct"]
        for r in self.rows:
            n = "-" if r.model == BASELINE else f"{r.n:g}"
            lines.append(f"{r.model},{n},{r.mean_dsc:.6f},{r.std_dsc:.6f},{r.improvement_pct:.4f}")
        return "\n".join(lines) + "\n"

    def to_text(self):
        head = f"{'Model':<10}{'n':>6}{'DSC mean':>12}{'std':>10}{'vs base %':>12}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            name = {"none": "no MoI", "moi1": "MoI1", "moi2": "MoI2"}[r.model]
            n = "-" if r.model == BASELINE else f"{r.n:g}"
            lines.append(f"{name:<10}{n:>6}{r.mean_dsc:>12.4f}{r.std_dsc:>10.4f}{r.improvement_pct:>+12.2f}")
        lines.append(f"(std {self.std_scope}; {self.rows[0].runs if self.rows else 0} runs per row)")
        return "\n".join(lines) + "\n"


def sweep_cells(models=MODELS, grid=POWER_GRID):
    return [(BASELINE, 1.0)] + [(m, float(n)) for m in models for n in grid]


def _cell_name(model, n):
    return BASELINE if model == BASELINE else f"{model}_n{n:g}"


def _run_job(job):
    """Worker body: one (cell, subset, fold, seed) run, persisted as JSON."""
    path, manifest, fold_id, net_cfg, train_cfg, k_folds, split_seed, fingerprint = job
    start = time.process_time()
    folds = kfold_split(manifest, k_folds, split_seed)
    train_m, test_m = folds[fold_id]
    report = run_fold(load_samples(train_m), load_samples(test_m), net_cfg, train_cfg, fold_id, fingerprint)
    # CPU time lives beside the report so the report itself stays reproducible
    _write_atomic(path[:-len(".json")] + ".cpu", f"{time.process_time() - start:.3f}\n")
    _write_atomic(path, report.to_json())
    return path


def _write_atomic(path, text):
    tmp = f"{path}.{os.getpid()}.tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _load_run(path, fingerprint):
    try:
        with open(path) as f:
            data = json.load(f)
    except (OSError, ValueError):
        return None
    if data.get("config_fingerprint") != fingerprint:
        return None
    return FoldReport(**data)


def run_sweep(base_manifest, out_dir, net_cfg, train_cfg, subsets=5, k=8, grid=POWER_GRID, models=MODELS,
              seeds=(0,), k_folds=5, data_seed=0, workers=1, progress=None, train_missing=True):
    """Train and score every (cell, subset, fold, seed) combination.

    Cells are the unweighted baseline plus each MoI model at each power.
    Subset ``s`` corrupts a disjoint block of ``k`` records.  Finished runs
    are stored under ``out_dir/runs`` and reused when the configuration
    fingerprint matches, so an interrupted sweep resumes where it stopped.
    With ``train_missing=False`` nothing is trained: missing runs are simply
    absent from the summary (their row's ``runs`` count is lower).
    """
    if subsets * k > len(base_manifest.records):
        raise ConfigError(f"{subsets} disjoint subsets of k={k} exceed {len(base_manifest.records)} records")
    os.makedirs(os.path.join(out_dir, "runs"), exist_ok=True)
    manifests = [
        corrupt_dataset(base_manifest, k, data_seed, os.path.join(out_dir, f"subset_{s}"), s, subsets)
        for s in range(subsets)
    ]
    cells = sweep_cells(models, grid)
    # seeds, subsets and folds vary slowest so a partial sweep covers every cell evenly
    plan = []
    for seed in seeds:
        for s, man in enumerate(manifests):
            for fold in range(k_folds):
                for model, n in cells:
                    cfg = replace(train_cfg, moi=model, power_n=n, seed=int(seed))
                    key = {**cfg.as_dict(), **{f"net.{a}": b for a, b in net_cfg.__dict__.items()},
                           "subset": s, "fold": fold, "k": k, "k_folds": k_folds, "data_seed": data_seed,
                           "flagged": tuple(man.flagged()), "numerics": NUMERICS_VERSION}
                    fp = config_fingerprint(key)
                    path = os.path.join(out_dir, "runs", f"{_cell_name(model, n)}_s{s}_f{fold}_seed{seed}.json")
                    plan.append(((model, n), path, (path, man, fold, net_cfg, cfg, k_folds, data_seed, fp), fp))

    pending = [job for _, path, job, fp in plan if _load_run(path, fp) is None]
    log.info("sweep: %d runs, %d pending", len(plan), len(pending))
    if not train_missing:
        pending = []
    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for path in pool.map(_run_job, pending):
                if progress is not None:
                    progress(path)
    else:
        for job in pending:
            _run_job(job)
            if progress is not None:
                progress(job[0])

    by_cell = {}
    for cell, path, _, fp in plan:
        rep = _load_run(path, fp)
        by_cell.setdefault(cell, []).append(rep)
    return summarize(cells, by_cell)


def summarize(cells, by_cell):
    """Build the report from per-run fold reports."""
    rows = []
    for cell in cells:
        reps = by_cell.get(cell, [])
        means = np.array([r.mean_dsc for r in reps if r is not None and r.mean_dsc is not None], dtype=np.float64)
        mean = float(np.mean(means)) if len(means) else float("nan")
        std = float(np.std(means, ddof=1)) if len(means) > 1 else 0.0
        rows.append(SweepRow(cell[0], cell[1], mean, std, 0.0, len(means)))
    base = rows[0].mean_dsc if rows and rows[0].model == BASELINE else float("nan")
    for r in rows:
        r.improvement_pct = 100.0 * (r.mean_dsc - base) / base if base and not math.isnan(base) else float("nan")
    return SweepReport(rows)


def cpu_seconds(out_dir):
    """Total recorded CPU seconds of finished runs under ``out_dir/runs``."""
    total = 0.0
    runs = os.path.join(out_dir, "runs")
    for name in sorted(os.listdir(runs)) if os.path.isdir(runs) else []:
        if name.endswith(".cpu"):
            with open(os.path.join(runs, name)) as f:
                total += float(f.read())
    return total


def write_report(report, out_dir):
    _write_atomic(os.path.join(out_dir, "sweep.csv"), report.to_csv())
    _write_atomic(os.path.join(out_dir, "sweep.txt"), report.to_text())
