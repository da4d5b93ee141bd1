"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line. Tolerances are fixed here, not calibrated elsewhere.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion lines.
"""

import io
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from confex.conformal import calibrate_threshold, nested_masks
from confex.conformity import (
    ConformityKind,
    ConformityScore,
    ThresholdGridSpec,
    score_pixelwise,
    score_summed,
)
from confex.evaluation import (
    CoverageTrialConfig,
    calibrate_and_explain,
    run_coverage_trial,
    summarize_coverage,
)
from confex.predictor import LinearPredictor, RegionWitnessPredictor
from confex.segmentation import SlicParams, slic_segment, slic_segment_with_energy
from confex.synthetic import InterferenceGenerator, WitnessGenerator
from confex.tensor_io import AttributionMap, ImageTensor, read_tensor, write_tensor

from test_conformity import oracle_pixelwise, oracle_summed
from test_conformal import enumerate_threshold
from test_segmentation import assert_valid_partition

ALL_DISTINCT = ThresholdGridSpec(mode="all_distinct")
ALL_KINDS = (
    ConformityKind("pixelwise"),
    ConformityKind("superpixel", 0.5),
    ConformityKind("scaled", 0.5),
    ConformityKind("summed"),
)


def _report(name: str, ok: bool, detail: str):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------

def test_criterion_coverage_guarantee():
    """Synthetic witness generator, k=500, n_test=1000, 20 seeds,
    eps in {.01,.05,.10,.15}, all four kinds: empirical infidelity within
    eps + 3*sqrt(eps(1-eps)/1000) in >= 95% of cells, in under 5 minutes."""
    cfg = CoverageTrialConfig(
        generator=WitnessGenerator(),
        kinds=ALL_KINDS,
        k_calibration=500,
        n_test=1000,
        epsilons=(0.01, 0.05, 0.10, 0.15),
        seeds=tuple(range(20)),
        jobs=2,
    )
    start = time.time()
    rows = run_coverage_trial(cfg)
    elapsed = time.time() - start
    summary = summarize_coverage(rows)
    ok = summary["ok_fraction"] >= 0.95 and elapsed < 300
    _report(
        "coverage guarantee",
        ok,
        f"{summary['ok']}/{summary['cells']} cells within bound "
        f"({100 * summary['ok_fraction']:.1f}%), worst excess {summary['worst_excess']:+.4f}, "
        f"{elapsed:.0f}s",
    )


def test_criterion_brute_force_oracle_equivalence():
    """200 random instances with <= 64 pixels, all-distinct grids: pixelwise
    score equals the exhaustive scan exactly; summed score equals the
    exhaustive minimum over preserving thresholds exactly."""
    rng = np.random.default_rng(2024)
    mismatches = 0
    for i in range(200):
        h, w = rng.integers(2, 9, size=2)  # <= 64 pixels
        x = rng.normal(size=(1, h, w)).astype(np.float32)
        phi = rng.choice(
            np.round(rng.normal(size=6), 2), size=(h, w)
        ).astype(np.float32)
        if i % 2 == 0:
            predictor = LinearPredictor(weights=rng.normal(size=(3, 1, h, w)))
        else:
            region = np.zeros((h, w), dtype=bool)
            region[: max(1, h // 2)] = True
            predictor = RegionWitnessPredictor(region=region, threshold=0.2)
        xi, pi = ImageTensor(x), AttributionMap(phi)
        s = score_pixelwise(xi, pi, predictor, ALL_DISTINCT)
        want = oracle_pixelwise(x.astype(np.float64), phi.astype(np.float64), predictor)
        if not (s.valid and s.value == want):
            mismatches += 1
        ss = score_summed(xi, pi, predictor, ALL_DISTINCT)
        want_sum = oracle_summed(x.astype(np.float64), phi.astype(np.float64), predictor)
        if not (ss.valid and math.isclose(ss.value, want_sum, rel_tol=0, abs_tol=1e-9)):
            mismatches += 1
    _report("brute-force oracle equivalence", mismatches == 0,
            f"200 instances, {mismatches} mismatches")


def test_criterion_quantile_rule_correctness():
    """1000 random score multisets and epsilons: the calibrated threshold
    satisfies the defining inequality with exact maximality/minimality;
    plus the k=19 worked examples."""
    rng = np.random.default_rng(99)
    bad = 0
    for _ in range(1000):
        k = int(rng.integers(1, 80))
        values = np.round(rng.normal(size=k) * rng.uniform(0.5, 20), 2)
        eps = float(rng.uniform(0.01, 0.99))
        for name in ("pixelwise", "summed"):
            kind = ConformityKind(name)
            scores = [ConformityScore(str(i), kind, float(v), True) for i, v in enumerate(values)]
            got = calibrate_threshold(scores, eps).threshold
            want = enumerate_threshold(values, eps, summed=(name == "summed"))
            if want is None or got != want:
                bad += 1

    k19 = [0.05 * (i + 1) for i in range(19)]
    pw = calibrate_threshold(
        [ConformityScore(str(i), ConformityKind("pixelwise"), v, True) for i, v in enumerate(k19)],
        0.05,
    ).threshold
    sm = calibrate_threshold(
        [ConformityScore(str(i), ConformityKind("summed"), float(i + 1), True) for i in range(19)],
        0.05,
    ).threshold
    worked = math.isclose(pw, 0.10) and sm == 18.0
    _report("quantile-rule correctness", bad == 0 and worked,
            f"1000 multisets, {bad} mismatches; k=19 gives {pw:.2f} and {sm:.0f}")


def test_criterion_nesting_and_monotonicity():
    """Threshold kinds: thresholds non-increasing and masks nested supersets
    per instance across confidence levels 85% -> 99%, on 100 instances."""
    gen = InterferenceGenerator()
    rng = np.random.default_rng(31)
    instances = gen.sample(rng, 300)
    cal, test = instances[:200], instances[200:300]
    epsilons = (0.15, 0.10, 0.05, 0.01)  # confidence 85 -> 99
    violations = []
    for kind in ALL_KINDS[:3]:
        results = calibrate_and_explain(cal, cal[:1], gen.predictor, kind, epsilons, ALL_DISTINCT)
        arts = [art for art, _ in results]
        thr = [a.threshold for a in arts]
        if not all(a >= b - 1e-12 for a, b in zip(thr, thr[1:])):
            violations.append(f"{kind.name}: thresholds not non-increasing {thr}")
        for inst in test:
            masks = nested_masks(inst.image, inst.phi, arts, gen.predictor, seg=inst.seg)
            for lo, hi in zip(masks, masks[1:]):
                if (lo.keep & ~hi.keep).any():
                    violations.append(f"{kind.name}: mask at higher confidence lost pixels")
                    break
    _report("nesting/monotonicity", not violations,
            f"3 threshold kinds x 100 instances x 4 levels; {violations or 'no violations'}")


def test_criterion_slic_invariants():
    """Partition, connectivity, determinism, non-increasing energy on 50
    random images; constant 16x16 with k=4 gives four 8x8 blocks."""
    rng = np.random.default_rng(5)
    issues = []
    for i in range(50):
        h, w = rng.integers(8, 24, size=2)
        channels = 3 if i % 3 == 0 else 1
        img = ImageTensor(rng.normal(size=(channels, h, w)).astype(np.float32))
        k = int(rng.integers(2, 9))
        params = SlicParams(target_segments=k)
        seg1, energies = slic_segment_with_energy(img, params)
        seg2 = slic_segment(img, params)
        if not np.array_equal(seg1.labels, seg2.labels):
            issues.append(f"image {i}: nondeterministic")
        if not all(b <= a + 1e-9 for a, b in zip(energies, energies[1:])):
            issues.append(f"image {i}: energy increased {energies}")
        try:
            assert_valid_partition(seg1)
        except AssertionError as exc:
            issues.append(f"image {i}: {exc}")
        if not (1 <= seg1.num_segments <= 2 * k):
            issues.append(f"image {i}: segment count {seg1.num_segments} vs k={k}")

    const = slic_segment(ImageTensor(np.zeros((1, 16, 16), np.float32)), SlicParams(target_segments=4))
    expected = np.zeros((16, 16), dtype=np.int32)
    expected[:8, 8:] = 1
    expected[8:, :8] = 2
    expected[8:, 8:] = 3
    blocks_ok = const.num_segments == 4 and np.array_equal(const.labels, expected)
    if not blocks_ok:
        issues.append("constant 16x16 did not split into four 8x8 blocks")
    _report("SLIC invariants", not issues, f"50 random images; {issues or 'all invariants hold'}")


def test_criterion_directional_fidelity_consistency():
    """Segment-level kinds track the target confidence more closely than the
    pixelwise kind (mean |fidelity - (1-eps)|, margin >= 0.02)."""
    gen = InterferenceGenerator()
    epsilons = (0.05, 0.10, 0.15)
    kinds = [ConformityKind("pixelwise"), ConformityKind("superpixel", 0.5), ConformityKind("scaled", 0.5)]
    fid = {k.name: {e: [] for e in epsilons} for k in kinds}
    for seed in range(6):
        rng = np.random.default_rng(1000 + seed)
        inst = gen.sample(rng, 900)
        cal, test = inst[:300], inst[300:]
        for kind in kinds:
            results = calibrate_and_explain(cal, test, gen.predictor, kind, epsilons, ALL_DISTINCT)
            for eps, (_, masks) in zip(epsilons, results):
                fid[kind.name][eps].append(np.mean([m.matches_full for m in masks]))
    dev = {
        name: float(np.mean([abs(np.mean(v[e]) - (1 - e)) for e in epsilons]))
        for name, v in fid.items()
    }
    margin_sp = dev["pixelwise"] - dev["superpixel"]
    margin_sc = dev["pixelwise"] - dev["scaled"]
    ok = margin_sp >= 0.02 and margin_sc >= 0.02
    _report(
        "directional check (a): segment kinds track confidence",
        ok,
        f"mean deviation pixelwise={dev['pixelwise']:.3f} superpixel={dev['superpixel']:.3f} "
        f"scaled={dev['scaled']:.3f}; margins {margin_sp:+.3f}/{margin_sc:+.3f} (need >= +0.02)",
    )


def test_criterion_directional_informativeness():
    """Honest attributions give strictly smaller mean mask sizes than shuffled
    attributions at every epsilon and for every kind (margin >= 0.02)."""
    gen = WitnessGenerator()
    epsilons = (0.05, 0.10, 0.15)
    worst = math.inf
    detail = []
    for kind in ALL_KINDS:
        sizes = {}
        for shuffled in (False, True):
            rng = np.random.default_rng(77)
            inst = gen.sample(rng, 600, shuffled=shuffled)
            cal, test = inst[:300], inst[300:]
            results = calibrate_and_explain(cal, test, gen.predictor, kind, epsilons, ALL_DISTINCT)
            sizes[shuffled] = [np.mean([m.size_fraction for m in masks]) for _, masks in results]
        margins = [s - h for h, s in zip(sizes[False], sizes[True])]
        worst = min(worst, min(margins))
        detail.append(f"{kind.name}: +{min(margins):.3f}")
    _report("directional check (b): honest beats shuffled", worst >= 0.02,
            f"worst margin {worst:+.3f} ({'; '.join(detail)})")


def test_criterion_interchange_and_protocol(tmp_path):
    """Tensor round-trips are bit-exact; a scripted frame transcript against
    the stdio server replays byte-identically."""
    rng = np.random.default_rng(8)
    bit_exact = True
    for _ in range(20):
        shape = tuple(rng.integers(1, 6, size=int(rng.integers(1, 4))))
        arr = rng.normal(size=shape).astype(np.float32)
        path = tmp_path / "t.cfxt"
        write_tensor(arr, path)
        back = read_tensor(path)
        bit_exact = bit_exact and back.tobytes() == arr.tobytes() and back.shape == arr.shape

    weights = rng.normal(size=(3, 1, 4, 4)).astype(np.float32)
    weights_path = tmp_path / "weights.cfxt"
    write_tensor(weights, weights_path)

    from confex.predictor import write_frame

    script = io.BytesIO()
    write_frame(script, {"op": "hello", "version": 1})
    batch1 = rng.normal(size=(2, 1, 4, 4)).astype("<f4")
    write_frame(script, {"op": "predict", "n": 2, "c": 1, "h": 4, "w": 4}, batch1.tobytes())
    batch2 = rng.normal(size=(1, 1, 4, 4)).astype("<f4")
    write_frame(script, {"op": "predict", "n": 1, "c": 1, "h": 4, "w": 4}, batch2.tobytes())
    transcript = script.getvalue()

    def run_server(stdin_bytes: bytes) -> bytes:
        proc = subprocess.run(
            [sys.executable, "-m", "confex.stdio_server", str(weights_path)],
            input=stdin_bytes,
            stdout=subprocess.PIPE,
            timeout=60,
        )
        return proc.stdout

    first = run_server(transcript)
    second = run_server(transcript)
    replay_ok = first == second and len(first) > 0
    _report("interchange + protocol", bit_exact and replay_ok,
            f"20 tensors bit-exact={bit_exact}, transcript replay byte-identical={first == second} "
            f"({len(first)} reply bytes)")
