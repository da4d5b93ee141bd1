"""Metrics and experiments: mask-size statistics, fidelity, coverage trials
and confidence sweeps."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .conformal import CalibrationArtifact, ExplanationMask, calibrate_threshold, explain
from .conformity import ConformityKind, ThresholdGridSpec, score_instance
from .predictor import predict_classes
from .synthetic import SyntheticInstance

CSV_FIELDS = ["kind", "rho", "epsilon", "k", "n_test", "mean_size", "std_size", "fidelity", "threshold"]
COVERAGE_FIELDS = ["kind", "rho", "epsilon", "seed", "k", "n_test", "infidelity", "bound", "ok", "mean_size"]


def format_value(v: float) -> str:
    """Table-style number: three decimals with trailing zeros trimmed."""
    return f"{round(float(v), 3):g}"


@dataclass(frozen=True)
class EvalReport:
    """Aggregate metrics for one (kind, epsilon) batch of explanation masks."""

    kind: ConformityKind
    epsilon: float
    k: int
    n_test: int
    mean_size: float
    std_size: float
    fidelity: float
    threshold: float
    rows: tuple = field(default=(), repr=False)

    def size_summary(self) -> str:
        return f"{format_value(self.mean_size)} ± {format_value(self.std_size)}"

    def to_csv_row(self) -> dict:
        return {
            "kind": self.kind.name,
            "rho": "" if self.kind.rho is None else self.kind.rho,
            "epsilon": self.epsilon,
            "k": self.k,
            "n_test": self.n_test,
            "mean_size": self.mean_size,
            "std_size": self.std_size,
            "fidelity": self.fidelity,
            "threshold": self.threshold,
        }


def evaluate(masks, artifact: CalibrationArtifact) -> EvalReport:
    """Exact fidelity and size statistics (population std) for a mask batch.

    Accepts ExplanationMask objects or their metadata dicts as loaded back
    from disk, so reports can be recomputed without the tensors.
    """
    if not masks:
        raise ValueError("cannot evaluate an empty mask list")
    rows = [m.to_json_dict() if isinstance(m, ExplanationMask) else dict(m) for m in masks]
    sizes = np.array([r["size_fraction"] for r in rows], dtype=np.float64)
    matches = np.array([bool(r["matches_full"]) for r in rows])
    return EvalReport(
        kind=artifact.kind,
        epsilon=artifact.epsilon,
        k=artifact.k,
        n_test=len(rows),
        mean_size=float(sizes.mean()),
        std_size=float(sizes.std()),
        fidelity=float(matches.mean()),
        threshold=artifact.threshold,
        rows=tuple(rows),
    )


def coverage_bound(epsilon: float, n_test: int) -> float:
    """Per-seed tolerance: epsilon plus three binomial standard deviations."""
    return epsilon + 3.0 * math.sqrt(epsilon * (1.0 - epsilon) / n_test)


# ---------------------------------------------------------------------------
# shared pipeline core

def calibrate_and_explain(
    cal: list[SyntheticInstance],
    test: list[SyntheticInstance],
    predictor,
    kind: ConformityKind,
    epsilons,
    grid_spec: ThresholdGridSpec,
    baseline=None,
    shuffled_note: str | None = None,
) -> list[tuple[CalibrationArtifact, list[ExplanationMask]]]:
    """Score a calibration set once, then calibrate + explain per epsilon."""
    scores = [
        score_instance(
            kind, inst.image, inst.phi, predictor, grid_spec,
            seg=inst.seg, baseline=baseline, instance_id=inst.instance_id,
        )
        for inst in cal
    ]
    n_valid = sum(s.valid for s in scores)
    if n_valid == 0:
        raise RuntimeError(
            "degenerate generator: no calibration instance had a preserving "
            f"threshold (kind={kind.name}"
            + (f", {shuffled_note}" if shuffled_note else "")
            + ")"
        )
    full_classes = predict_classes(predictor, np.stack([t.image.data for t in test]))
    out = []
    for eps in epsilons:
        art = calibrate_threshold(scores, eps, grid_spec=grid_spec)
        masks = [
            explain(
                inst.image, inst.phi, art, predictor,
                seg=inst.seg, baseline=baseline,
                instance_id=inst.instance_id, full_class=int(full_classes[i]),
            )
            for i, inst in enumerate(test)
        ]
        out.append((art, masks))
    return out


# ---------------------------------------------------------------------------
# coverage validation

@dataclass(frozen=True)
class CoverageTrialConfig:
    """One coverage experiment: fresh calibration/test draws per seed."""

    generator: object
    kinds: tuple[ConformityKind, ...]
    k_calibration: int = 500
    n_test: int = 1000
    epsilons: tuple[float, ...] = (0.01, 0.05, 0.10, 0.15)
    seeds: tuple[int, ...] = tuple(range(20))
    grid_spec: ThresholdGridSpec = ThresholdGridSpec(mode="all_distinct")
    jobs: int = 1

    def __post_init__(self):
        if self.k_calibration < 10:
            raise ValueError("k_calibration must be >= 10")
        if self.n_test < 100:
            raise ValueError("n_test must be >= 100")


def _coverage_one_seed(args) -> list[dict]:
    cfg, seed = args
    rng = np.random.default_rng(seed)
    gen = cfg.generator
    instances = gen.sample(rng, cfg.k_calibration + cfg.n_test, id_prefix=f"s{seed}_")
    cal, test = instances[: cfg.k_calibration], instances[cfg.k_calibration :]
    rows = []
    for kind in cfg.kinds:
        results = calibrate_and_explain(
            cal, test, gen.predictor, kind, cfg.epsilons, cfg.grid_spec
        )
        for eps, (art, masks) in zip(cfg.epsilons, results):
            infidelity = 1.0 - float(np.mean([m.matches_full for m in masks]))
            bound = coverage_bound(eps, cfg.n_test)
            rows.append(
                {
                    "kind": kind.name,
                    "rho": "" if kind.rho is None else kind.rho,
                    "epsilon": eps,
                    "seed": seed,
                    "k": cfg.k_calibration,
                    "n_test": cfg.n_test,
                    "infidelity": infidelity,
                    "bound": bound,
                    "ok": infidelity <= bound,
                    "mean_size": float(np.mean([m.size_fraction for m in masks])),
                }
            )
    return rows


def run_coverage_trial(cfg: CoverageTrialConfig) -> list[dict]:
    """Empirical check of the coverage guarantee.

    For every (seed, kind, epsilon): calibrate on fresh instances, explain a
    fresh test set, and record the empirical infidelity against
    epsilon + 3*sqrt(eps(1-eps)/n_test). Returns one row per cell, ordered by
    seed then kind then epsilon (deterministic for fixed config).
    """
    tasks = [(cfg, seed) for seed in cfg.seeds]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            per_seed = list(pool.map(_coverage_one_seed, tasks))
    else:
        per_seed = [_coverage_one_seed(t) for t in tasks]
    return [row for rows in per_seed for row in rows]


def summarize_coverage(rows: list[dict]) -> dict:
    total = len(rows)
    ok = sum(r["ok"] for r in rows)
    return {
        "cells": total,
        "ok": ok,
        "ok_fraction": ok / total if total else float("nan"),
        "worst_excess": max((r["infidelity"] - r["bound"] for r in rows), default=float("nan")),
    }


# ---------------------------------------------------------------------------
# confidence sweeps

def confidence_sweep(
    cal: list[SyntheticInstance],
    test: list[SyntheticInstance],
    predictor,
    kinds,
    epsilons,
    grid_spec: ThresholdGridSpec | None = None,
    baseline=None,
) -> list[EvalReport]:
    """Size/fidelity across confidence levels for each conformity kind."""
    grid_spec = grid_spec or ThresholdGridSpec()
    reports = []
    for kind in kinds:
        for art, masks in calibrate_and_explain(
            cal, test, predictor, kind, epsilons, grid_spec, baseline
        ):
            reports.append(evaluate(masks, art))
    return reports


def write_csv(rows, path, fields=None) -> None:
    rows = [r.to_csv_row() if isinstance(r, EvalReport) else r for r in rows]
    fields = fields or CSV_FIELDS
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
