import numpy as np
import pytest

from confex.conformal import CalibrationArtifact
from confex.conformity import ConformityKind, ThresholdGridSpec
from confex.evaluation import (
    CSV_FIELDS,
    CoverageTrialConfig,
    EvalReport,
    calibrate_and_explain,
    confidence_sweep,
    coverage_bound,
    evaluate,
    format_value,
    read_csv,
    run_coverage_trial,
    summarize_coverage,
    write_csv,
)
from confex.synthetic import InterferenceGenerator, WitnessGenerator

ALL_DISTINCT = ThresholdGridSpec(mode="all_distinct")
KINDS = (
    ConformityKind("pixelwise"),
    ConformityKind("superpixel", 0.5),
    ConformityKind("scaled", 0.5),
    ConformityKind("summed"),
)


def _artifact(kind=ConformityKind("pixelwise"), epsilon=0.05, threshold=0.3) -> CalibrationArtifact:
    return CalibrationArtifact(kind=kind, epsilon=epsilon, k=10, threshold=threshold, grid_spec=ALL_DISTINCT)


def test_evaluate_arithmetic():
    rows = [
        {"instance_id": "a", "size_fraction": 0.2, "reproduced_class": 1, "matches_full": True},
        {"instance_id": "b", "size_fraction": 0.4, "reproduced_class": 0, "matches_full": True},
    ]
    report = evaluate(rows, _artifact())
    assert report.fidelity == 1.0
    assert report.mean_size == pytest.approx(0.3)
    assert report.std_size == pytest.approx(0.1)
    assert report.n_test == 2


def test_evaluate_rejects_empty():
    with pytest.raises(ValueError):
        evaluate([], _artifact())


def test_report_row_formatting_matches_table_style():
    report = EvalReport(
        kind=ConformityKind("superpixel", 0.5), epsilon=0.05, k=100, n_test=10,
        mean_size=0.367, std_size=0.181, fidelity=0.96, threshold=0.5,
    )
    assert report.size_summary() == "0.367 ± 0.181"
    assert format_value(0.49) == "0.49"


def test_csv_schema_roundtrip(tmp_path):
    report = EvalReport(
        kind=ConformityKind("scaled", 0.5), epsilon=0.1, k=50, n_test=20,
        mean_size=0.25, std_size=0.05, fidelity=0.9, threshold=1.5,
    )
    path = tmp_path / "report.csv"
    write_csv([report], path)
    rows = read_csv(path)
    assert list(rows[0].keys()) == CSV_FIELDS
    assert rows[0]["kind"] == "scaled"
    assert float(rows[0]["fidelity"]) == 0.9


def test_coverage_bound_value():
    assert coverage_bound(0.05, 1000) == pytest.approx(0.05 + 3 * np.sqrt(0.05 * 0.95 / 1000))


def test_small_coverage_trial_passes_and_is_deterministic():
    cfg = CoverageTrialConfig(
        generator=WitnessGenerator(), kinds=KINDS[:2], k_calibration=80, n_test=150,
        epsilons=(0.05, 0.2), seeds=(0, 1), jobs=1,
    )
    rows1 = run_coverage_trial(cfg)
    rows2 = run_coverage_trial(cfg)
    assert rows1 == rows2
    summary = summarize_coverage(rows1)
    assert summary["cells"] == 8
    assert summary["ok_fraction"] >= 0.75


def test_epsilon_to_zero_keeps_nearly_everything():
    gen = WitnessGenerator()
    rng = np.random.default_rng(0)
    inst = gen.sample(rng, 160)
    cal, test = inst[:80], inst[80:]
    (_, masks_tiny), (_, masks_loose) = calibrate_and_explain(
        cal, test, gen.predictor, ConformityKind("pixelwise"), (0.005, 0.4), ALL_DISTINCT
    )
    infid_tiny = 1 - np.mean([m.matches_full for m in masks_tiny])
    assert infid_tiny == 0.0
    assert np.mean([m.size_fraction for m in masks_tiny]) >= np.mean(
        [m.size_fraction for m in masks_loose]
    )


def test_exchangeability_under_pooled_permutation():
    """Permuting pooled calibration+test instances before splitting leaves the
    per-seed coverage distribution statistically unchanged."""
    gen = WitnessGenerator()
    kind = ConformityKind("pixelwise")
    eps = 0.1

    def infidelity(seed, permute):
        rng = np.random.default_rng(seed)
        inst = gen.sample(rng, 300)
        if permute:
            order = rng.permutation(len(inst))
            inst = [inst[i] for i in order]
        cal, test = inst[:150], inst[150:]
        ((_, masks),) = calibrate_and_explain(cal, test, gen.predictor, kind, (eps,), ALL_DISTINCT)
        return 1 - np.mean([m.matches_full for m in masks])

    plain = [infidelity(s, False) for s in range(6)]
    permuted = [infidelity(s, True) for s in range(6)]
    assert abs(np.mean(plain) - np.mean(permuted)) < 0.05


def test_coverage_trial_rejects_tiny_setup():
    with pytest.raises(ValueError):
        CoverageTrialConfig(generator=WitnessGenerator(), kinds=KINDS, k_calibration=5)
    with pytest.raises(ValueError):
        CoverageTrialConfig(generator=WitnessGenerator(), kinds=KINDS, n_test=50)


class FlakyPredictor:
    """Alternates classes between calls, so no threshold ever preserves."""

    num_classes = 2
    batch_limit = 4096

    def __init__(self):
        self.calls = 0

    def predict(self, batch):
        self.calls += 1
        scores = np.zeros((batch.shape[0], 2))
        scores[:, self.calls % 2] = 1.0
        return scores


def test_degenerate_generator_aborts_with_diagnostic():
    gen = WitnessGenerator()
    rng = np.random.default_rng(0)
    inst = gen.sample(rng, 12)
    with pytest.raises(RuntimeError, match="degenerate"):
        calibrate_and_explain(
            inst[:6], inst[6:], FlakyPredictor(), ConformityKind("pixelwise"), (0.2,), ALL_DISTINCT
        )


def test_confidence_sweep_reports_monotone_sizes():
    gen = WitnessGenerator()
    rng = np.random.default_rng(1)
    inst = gen.sample(rng, 240)
    cal, test = inst[:120], inst[120:]
    epsilons = (0.15, 0.10, 0.05, 0.01)  # confidence 85 -> 99
    reports = confidence_sweep(cal, test, gen.predictor, KINDS[:3], epsilons, ALL_DISTINCT)
    assert len(reports) == 12
    for kind in KINDS[:3]:
        sizes = [r.mean_size for r in reports if r.kind == kind]
        confs = [1 - r.epsilon for r in reports if r.kind == kind]
        order = np.argsort(confs)
        ordered = np.array(sizes)[order]
        assert all(a <= b + 1e-12 for a, b in zip(ordered, ordered[1:]))


def test_honest_attributions_are_more_informative_than_shuffled():
    gen = WitnessGenerator()
    kind = ConformityKind("pixelwise")
    sizes = {}
    for shuffled in (False, True):
        rng = np.random.default_rng(5)
        inst = gen.sample(rng, 300, shuffled=shuffled)
        cal, test = inst[:150], inst[150:]
        ((_, masks),) = calibrate_and_explain(cal, test, gen.predictor, kind, (0.1,), ALL_DISTINCT)
        sizes[shuffled] = np.mean([m.size_fraction for m in masks])
    assert sizes[False] + 0.02 < sizes[True]


def test_interference_scene_statistics():
    gen = InterferenceGenerator()
    rng = np.random.default_rng(2)
    inst = gen.sample(rng, 64)
    from confex.predictor import predict_classes

    classes = predict_classes(gen.predictor, np.stack([i.image.data for i in inst]))
    assert classes.mean() > 0.98  # object evidence dominates
    obj = gen.object_mask
    img = inst[0].image.data[0]
    assert img[obj].min() > 0 and img[~obj].max() < 0
