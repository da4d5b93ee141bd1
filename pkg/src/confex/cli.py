"""Command-line pipeline: segment -> scores -> calibrate -> explain ->
evaluate, plus coverage simulation and PNG rendering.

Stages communicate only through documented files (CFXT tensors, JSON
manifests/artifacts, JSONL scores/masks, CSV tables), so any stage can be
re-run from its inputs. Exit codes: 0 ok, 1 usage/config, 2 predictor
transport, 3 data integrity.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conformal import CalibrationArtifact, calibrate_threshold, explain, load_mask_metadata, save_masks
from .conformity import (
    ConformityKind,
    SEGMENT_KINDS,
    ThresholdGridSpec,
    load_scores,
    save_scores,
    score_instance,
)
from .errors import DataIntegrityError, ManifestError, PredictorTransportError, TensorFormatError
from .evaluation import (
    COVERAGE_FIELDS,
    CoverageTrialConfig,
    evaluate,
    run_coverage_trial,
    summarize_coverage,
    write_csv,
)
from .predictor import parse_predictor_spec
from .segmentation import SegmentationMap, SlicParams, slic_segment
from .synthetic import WitnessGenerator
from .tensor_io import DatasetManifest, load_baseline, load_instance, load_manifest


class _Parser(argparse.ArgumentParser):
    # exit code 2 is reserved for predictor transport errors
    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings shared by the pipeline stages."""

    manifest: str
    out: str
    predictor: str | None = None
    kind: ConformityKind | None = None
    epsilons: tuple[float, ...] = ()
    grid_spec: ThresholdGridSpec = ThresholdGridSpec()
    slic: SlicParams = SlicParams()
    seed: int = 0
    cal_frac: float = 0.5
    jobs: int = 1

    def __post_init__(self):
        if not all(0 < e < 1 for e in self.epsilons):
            raise ValueError("every epsilon must lie in (0,1)")
        if not (0 < self.cal_frac < 1):
            raise ValueError("calibration fraction must lie in (0,1)")


def _run_config(args, need_kind: bool = False) -> RunConfig:
    return RunConfig(
        manifest=getattr(args, "manifest", ""),
        out=args.out,
        predictor=getattr(args, "predictor", None),
        kind=_kind(args) if need_kind else None,
        epsilons=tuple(getattr(args, "epsilon", None) or ()),
        grid_spec=_grid_spec(args) if hasattr(args, "tau_quantiles") else ThresholdGridSpec(),
        slic=_slic_params(args) if hasattr(args, "slic_k") else SlicParams(),
        seed=args.seed,
        cal_frac=getattr(args, "cal_frac", 0.5),
        jobs=args.jobs,
    )


def _add_common(p: _Parser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, default=0, help="split/simulation seed")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)


def _add_slic(p: _Parser) -> None:
    p.add_argument("--slic-k", type=int, default=100, help="target super-pixel count")
    p.add_argument("--slic-compactness", type=float, default=10.0)
    p.add_argument("--slic-iters", type=int, default=10)
    p.add_argument("--no-seed-perturb", action="store_true", help="disable gradient seed perturbation")


def _add_kind(p: _Parser) -> None:
    p.add_argument("--kind", choices=["pixelwise", "superpixel", "scaled", "summed"], default="pixelwise")
    p.add_argument("--rho", type=float, default=0.5, help="segment inclusion fraction")


def _add_tau(p: _Parser) -> None:
    p.add_argument("--tau-quantiles", type=int, default=100, metavar="Q", help="quantile-level grid size")
    p.add_argument("--tau-linspace", action="store_true", help="even grid over [min,max] instead of quantiles")
    p.add_argument("--tau-distinct", action="store_true", help="use every distinct attribution value")


def _add_split(p: _Parser) -> None:
    p.add_argument("--cal-frac", type=float, default=0.5, help="calibration fraction of the manifest")


def _slic_params(args) -> SlicParams:
    return SlicParams(
        target_segments=args.slic_k,
        compactness=args.slic_compactness,
        max_iters=args.slic_iters,
        perturb_seeds=not args.no_seed_perturb,
    )


def _grid_spec(args) -> ThresholdGridSpec:
    if args.tau_distinct:
        return ThresholdGridSpec(mode="all_distinct")
    if args.tau_linspace:
        return ThresholdGridSpec(mode="linspace", q=args.tau_quantiles)
    return ThresholdGridSpec(mode="quantile", q=args.tau_quantiles)


def _kind(args) -> ConformityKind:
    rho = args.rho if args.kind in SEGMENT_KINDS else None
    return ConformityKind(args.kind, rho)


def _load_nonempty_manifest(path) -> DatasetManifest:
    manifest = load_manifest(path)
    if len(manifest) == 0:
        raise ValueError("no instances in manifest")
    return manifest


def _split_indices(n: int, seed: int, cal_frac: float) -> tuple[list[int], list[int]]:
    if not (0 < cal_frac < 1):
        raise ValueError("calibration fraction must lie in (0,1)")
    perm = np.random.default_rng(seed).permutation(n)
    n_cal = max(1, min(n - 1, round(cal_frac * n))) if n > 1 else 1
    return sorted(perm[:n_cal].tolist()), sorted(perm[n_cal:].tolist())


def _segments_dir(out: str, params: SlicParams) -> Path:
    return Path(out) / "segments" / params.digest()


def _resolve_segmentation(item, seg_dir: Path) -> SegmentationMap:
    if item.segmentation_path is not None:
        return SegmentationMap.load(item.segmentation_path)
    path = seg_dir / f"{item.instance_id}.cfxt"
    if not path.exists():
        raise ValueError(
            f"no segmentation for instance {item.instance_id!r}; run `confex segment` first"
        )
    return SegmentationMap.load(path)


def _parallel_map(fn, items, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# subcommands

def cmd_segment(args) -> int:
    cfg = _run_config(args)
    manifest = _load_nonempty_manifest(cfg.manifest)
    seg_dir = _segments_dir(cfg.out, cfg.slic)
    seg_dir.mkdir(parents=True, exist_ok=True)

    def work(item) -> bool:
        path = seg_dir / f"{item.instance_id}.cfxt"
        if path.exists():
            return False
        img, _ = load_instance(manifest, item)
        slic_segment(img, cfg.slic).save(path)
        return True

    produced = sum(_parallel_map(work, list(manifest.items), cfg.jobs))
    print(f"segment: {produced} computed, {len(manifest) - produced} already present -> {seg_dir}")
    return 0


def cmd_scores(args) -> int:
    cfg = _run_config(args, need_kind=True)
    manifest = _load_nonempty_manifest(cfg.manifest)
    kind = cfg.kind
    seg_dir = _segments_dir(cfg.out, cfg.slic)
    baseline = load_baseline(manifest)
    predictor = parse_predictor_spec(cfg.predictor)
    cal_idx, _ = _split_indices(len(manifest), cfg.seed, cfg.cal_frac)

    def work(idx: int):
        item = manifest.items[idx]
        img, phi = load_instance(manifest, item)
        seg = _resolve_segmentation(item, seg_dir) if kind.uses_segmentation else None
        return score_instance(
            kind, img, phi, predictor, cfg.grid_spec, seg=seg, baseline=baseline,
            reference_class=item.cached_prediction, instance_id=item.instance_id,
        )

    scores = _parallel_map(work, cal_idx, cfg.jobs)
    scores.sort(key=lambda s: s.instance_id)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    scores_path = out / f"scores_{kind.name}.jsonl"
    save_scores(scores, scores_path)
    meta = {
        "kind": kind.name,
        "rho": kind.rho,
        "manifest_digest": manifest.digest,
        "slic_digest": cfg.slic.digest() if kind.uses_segmentation else None,
        "seed": cfg.seed,
        "cal_frac": cfg.cal_frac,
        "n_calibration": len(scores),
    }
    meta.update(cfg.grid_spec.to_json_dict())
    (out / f"scores_{kind.name}.meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    n_valid = sum(s.valid for s in scores)
    print(f"scores: {len(scores)} instances ({n_valid} valid) -> {scores_path}")
    return 0


def cmd_calibrate(args) -> int:
    scores = load_scores(args.scores)
    meta_file = Path(str(args.scores).replace(".jsonl", ".meta.json"))
    meta = json.loads(meta_file.read_text()) if meta_file.exists() else {}
    grid_spec = ThresholdGridSpec.from_json_dict(meta) if "tau_mode" in meta else _grid_spec(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for eps in args.epsilon or [0.05]:
        artifact = calibrate_threshold(
            scores, eps, grid_spec=grid_spec,
            slic_digest=meta.get("slic_digest"), manifest_digest=meta.get("manifest_digest"),
        )
        if artifact.sentinel:
            print(
                f"warning: sentinel threshold at epsilon={eps}; masks will keep everything",
                file=sys.stderr,
            )
        path = out / f"artifact_{artifact.kind.name}_{eps:g}.json"
        artifact.save(path)
        print(f"calibrate: epsilon={eps:g} threshold={artifact.threshold:g} -> {path}")
    return 0


def cmd_explain(args) -> int:
    cfg = _run_config(args)
    manifest = _load_nonempty_manifest(cfg.manifest)
    artifact = CalibrationArtifact.load(args.artifact)
    slic_digest = cfg.slic.digest() if artifact.kind.uses_segmentation else None
    artifact.check_compatible(manifest.digest, slic_digest)
    seg_dir = _segments_dir(cfg.out, cfg.slic)
    baseline = load_baseline(manifest)
    predictor = parse_predictor_spec(cfg.predictor)
    cal_idx, test_idx = _split_indices(len(manifest), cfg.seed, cfg.cal_frac)
    idx = {"test": test_idx, "calibration": cal_idx, "all": list(range(len(manifest)))}[args.split]

    def work(i: int):
        item = manifest.items[i]
        img, phi = load_instance(manifest, item)
        seg = _resolve_segmentation(item, seg_dir) if artifact.kind.uses_segmentation else None
        return explain(
            img, phi, artifact, predictor, seg=seg, baseline=baseline,
            instance_id=item.instance_id, full_class=item.cached_prediction,
        )

    masks = _parallel_map(work, idx, cfg.jobs)
    masks.sort(key=lambda m: m.instance_id)
    mask_dir = Path(cfg.out) / f"masks_{artifact.kind.name}_{artifact.epsilon:g}"
    meta_path = save_masks(masks, mask_dir)
    print(f"explain: {len(masks)} masks -> {meta_path}")
    return 0


def cmd_evaluate(args) -> int:
    artifact = CalibrationArtifact.load(args.artifact)
    rows = load_mask_metadata(args.masks)
    if not rows:
        raise ValueError("no masks to evaluate")
    report = evaluate(rows, artifact)
    print(
        f"evaluate: kind={report.kind.name} epsilon={report.epsilon:g} "
        f"n={report.n_test} fidelity={report.fidelity:.3f} size={report.size_summary()}"
    )
    if args.csv:
        path = Path(args.csv)
        exists = path.exists()
        import csv as _csv

        with open(path, "a", newline="") as fh:
            writer = _csv.DictWriter(fh, fieldnames=list(report.to_csv_row()))
            if not exists:
                writer.writeheader()
            writer.writerow(report.to_csv_row())
        print(f"evaluate: appended -> {path}")
    return 0


def cmd_simulate(args) -> int:
    kinds = []
    for name in args.kinds or ["pixelwise", "superpixel", "scaled", "summed"]:
        kinds.append(ConformityKind(name, args.rho if name in SEGMENT_KINDS else None))
    cfg = CoverageTrialConfig(
        generator=WitnessGenerator(),
        kinds=tuple(kinds),
        k_calibration=args.k_cal,
        n_test=args.n_test,
        epsilons=tuple(args.epsilon or [0.01, 0.05, 0.10, 0.15]),
        seeds=tuple(range(args.seed, args.seed + args.seeds)),
        jobs=args.jobs,
    )
    rows = run_coverage_trial(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "coverage.csv"
    write_csv(rows, path, fields=COVERAGE_FIELDS)
    summary = summarize_coverage(rows)
    print(
        f"simulate: {summary['ok']}/{summary['cells']} cells within bound "
        f"({100 * summary['ok_fraction']:.1f}%), worst excess {summary['worst_excess']:+.4f} -> {path}"
    )
    return 0


def cmd_render(args) -> int:
    from .render import render_mask_overlay, render_sweep_charts

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.sweep:
        from .evaluation import read_csv

        paths = render_sweep_charts(read_csv(args.sweep), out)
        for p in paths:
            print(f"render: {p}")
        return 0
    if not (args.manifest and args.masks):
        raise ValueError("render needs either --sweep or --manifest and --masks")
    manifest = _load_nonempty_manifest(args.manifest)
    rows = load_mask_metadata(args.masks)
    by_id = {item.instance_id: item for item in manifest.items}
    mask_dir = Path(args.masks).parent
    from .tensor_io import read_tensor

    for row in rows[: args.limit]:
        iid = row["instance_id"]
        item = by_id.get(iid)
        if item is None:
            raise DataIntegrityError(f"mask {iid!r} not present in manifest")
        img, _ = load_instance(manifest, item)
        keep = read_tensor(mask_dir / f"{iid}.cfxt") > 0.5
        caption = render_mask_overlay(img.data, keep, out / f"{iid}.png", row["size_fraction"])
        print(f"render: {iid}: {caption}")
    return 0


# ---------------------------------------------------------------------------
# parser assembly

def build_parser() -> _Parser:
    parser = _Parser(prog="confex", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("segment", help="compute super-pixel segmentations for a manifest")
    p.add_argument("--manifest", required=True)
    _add_common(p)
    _add_slic(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("scores", help="conformity scores for the calibration split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--predictor", required=True, help="synthetic:<spec> or subprocess:<cmd>")
    _add_common(p)
    _add_slic(p)
    _add_kind(p)
    _add_tau(p)
    _add_split(p)
    p.set_defaults(func=cmd_scores)

    p = sub.add_parser("calibrate", help="conformal threshold from a scores file")
    p.add_argument("--scores", required=True)
    p.add_argument("--epsilon", type=float, action="append", help="repeatable")
    _add_common(p)
    _add_tau(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("explain", help="explanation masks for the test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--artifact", required=True)
    p.add_argument("--predictor", required=True)
    p.add_argument("--split", choices=["test", "calibration", "all"], default="test")
    _add_common(p)
    _add_slic(p)
    _add_split(p)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("evaluate", help="fidelity/size report for explained masks")
    p.add_argument("--masks", required=True, help="masks.jsonl metadata file")
    p.add_argument("--artifact", required=True)
    p.add_argument("--csv", help="append the report row to this CSV")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="synthetic coverage-guarantee trial")
    p.add_argument("--kinds", nargs="*", choices=["pixelwise", "superpixel", "scaled", "summed"])
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--k-cal", type=int, default=500)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--seeds", type=int, default=20, help="number of seeds")
    p.add_argument("--epsilon", type=float, action="append")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("render", help="PNG mask overlays or sweep charts")
    p.add_argument("--manifest")
    p.add_argument("--masks", help="masks.jsonl metadata file")
    p.add_argument("--sweep", help="evaluation CSV for line charts")
    p.add_argument("--limit", type=int, default=16)
    _add_common(p)
    p.set_defaults(func=cmd_render)

    return parser


def _apply_config(parser: _Parser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        overrides = json.loads(Path(args.config).read_text())
        known = vars(args)
        bad = [k for k in overrides if k not in known]
        if bad:
            raise ValueError(f"unknown config keys: {bad}")
        # flags given explicitly on the command line win over the config file
        for key, value in overrides.items():
            if f"--{key.replace('_', '-')}" not in argv:
                setattr(args, key, value)
    return args


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        try:
            args = _apply_config(parser, argv)
        except SystemExit as exc:
            return int(exc.code or 0)
        return args.func(args)
    except PredictorTransportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataIntegrityError, ManifestError, TensorFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
