"""Evaluation harness: overlap, folding, histogram MI, runtime, records."""

from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import transform as tf
from .errors import ConfigurationError, FormatError
from .synthdata import LabelMap, Volume


def dice(a, b):
    """Per-label and mean Dice overlap, background (label 0) excluded.

    Labels absent from both maps are excluded; a label present in only one
    map scores 0. Returns (per_label dict, mean).
    """
    la = a.labels if isinstance(a, LabelMap) else np.asarray(a)
    lb = b.labels if isinstance(b, LabelMap) else np.asarray(b)
    if la.shape != lb.shape:
        raise ConfigurationError(f"dice: shapes differ {la.shape} vs {lb.shape}")
    labels = sorted(set(np.unique(la)) | set(np.unique(lb)))
    labels = [int(l) for l in labels if l != 0]
    if not labels:
        raise ConfigurationError("dice: no non-background labels present")
    per_label = {}
    for l in labels:
        in_a = la == l
        in_b = lb == l
        denom = int(in_a.sum()) + int(in_b.sum())
        per_label[l] = 2.0 * int((in_a & in_b).sum()) / denom
    return per_label, float(np.mean(list(per_label.values())))


def count_nonpositive_jacobian(u: np.ndarray):
    """Interior voxels with det(J) <= 0 (folding); returns (count, fraction).

    Border voxels are excluded because one-sided difference stencils there
    produce spurious signs.
    """
    det = tf.jacobian_determinant(u)
    inner = det[tuple(slice(1, -1) for _ in det.shape)]
    count = int((inner <= 0).sum())
    return count, count / inner.size


def binned_mi(a, b, bins: int = 64) -> float:
    """Plug-in mutual information (nats) of the joint intensity histogram.

    Intensities are binned on the fixed range [0, 1], matching the Volume
    contract. This is a test oracle, not a training loss.
    """
    xa = (a.data if isinstance(a, Volume) else np.asarray(a)).ravel()
    xb = (b.data if isinstance(b, Volume) else np.asarray(b)).ravel()
    if xa.shape != xb.shape:
        raise ConfigurationError("binned_mi: inputs differ in size")
    if bins < 2:
        raise ConfigurationError("binned_mi: bins must be >= 2")
    joint, _, _ = np.histogram2d(xa, xb, bins=bins, range=[[0.0, 1.0], [0.0, 1.0]])
    p = joint / joint.sum()
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    mask = p > 0
    return float((p[mask] * np.log(p[mask] / (pa @ pb)[mask])).sum())


def benchmark_runtime(register_fn, repeats: int = 5, clock=time.perf_counter):
    """Median and sd of wall-clock seconds over repeated registrations.

    ``register_fn`` must cover the inference path only (posterior,
    integration, warp); similarity terms are not evaluated at test time.
    The clock is injectable so measurement boundaries are testable.
    """
    if repeats < 1:
        raise ConfigurationError("benchmark_runtime: repeats must be >= 1")
    times = []
    for _ in range(repeats):
        t0 = clock()
        register_fn()
        times.append(clock() - t0)
    med = statistics.median(times)
    sd = statistics.stdev(times) if repeats > 1 else 0.0
    return med, sd


EVAL_CSV_COLUMNS = ["method", "alpha", "lambda", "seed", "mean_dice",
                    "dice_per_label_json", "nonpos_jac_count", "nonpos_jac_frac",
                    "runtime_s_median", "runtime_s_sd"]


@dataclass
class EvalRecord:
    """One method/configuration evaluation outcome (a results-table row).

    mean_dice may be NaN when no label maps were available to score.
    """

    method: str
    alpha: float
    lam: float
    seed: int
    mean_dice: float
    dice_per_label: dict
    nonpos_jac_count: int
    nonpos_jac_frac: float
    runtime_s_median: float
    runtime_s_sd: float

    def __post_init__(self):
        if not (np.isnan(self.mean_dice) or 0.0 <= self.mean_dice <= 1.0):
            raise ConfigurationError(f"EvalRecord: mean_dice {self.mean_dice} outside [0,1]")
        if self.nonpos_jac_count < 0:
            raise ConfigurationError("EvalRecord: negative fold count")

    def to_row(self) -> list:
        return [self.method, repr(float(self.alpha)), repr(float(self.lam)),
                str(self.seed), repr(float(self.mean_dice)),
                json.dumps({str(k): v for k, v in sorted(self.dice_per_label.items())}),
                str(self.nonpos_jac_count), repr(float(self.nonpos_jac_frac)),
                repr(float(self.runtime_s_median)), repr(float(self.runtime_s_sd))]

    @classmethod
    def from_row(cls, row: list) -> "EvalRecord":
        if len(row) != len(EVAL_CSV_COLUMNS):
            raise FormatError(f"EvalRecord: expected {len(EVAL_CSV_COLUMNS)} columns, "
                              f"got {len(row)}")
        return cls(method=row[0], alpha=float(row[1]), lam=float(row[2]),
                   seed=int(row[3]), mean_dice=float(row[4]),
                   dice_per_label={int(k): v for k, v in json.loads(row[5]).items()},
                   nonpos_jac_count=int(row[6]), nonpos_jac_frac=float(row[7]),
                   runtime_s_median=float(row[8]), runtime_s_sd=float(row[9]))


def write_records(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_CSV_COLUMNS)
        for r in records:
            w.writerow(r.to_row())


def read_records(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != EVAL_CSV_COLUMNS:
        raise FormatError(f"{path}: missing or wrong CSV header")
    return [EvalRecord.from_row(r) for r in rows[1:]]


def sweep_alpha(alphas, methods, run_one) -> list:
    """Evaluate run_one(method, alpha) -> EvalRecord over the grid.

    Results are aggregated in a deterministic order (sorted by alpha, then
    method) regardless of execution order.
    """
    alphas = list(alphas)
    if len(alphas) < 2:
        raise ConfigurationError("sweep_alpha: need at least 2 alpha values")
    records = [run_one(m, a) for a in alphas for m in methods]
    records.sort(key=lambda r: (r.alpha, r.method))
    return records
