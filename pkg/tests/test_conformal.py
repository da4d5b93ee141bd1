import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from confex.conformal import (
    CalibrationArtifact,
    calibrate_threshold,
    explain,
    nested_masks,
    save_masks,
    load_mask_metadata,
    summed_prefix_mask,
)
from confex.conformity import (
    ConformityKind,
    ConformityScore,
    ThresholdGridSpec,
    score_pixelwise,
    score_summed,
    selection_at_threshold,
)
from confex.errors import DataIntegrityError
from confex.predictor import ConstantPredictor, RegionWitnessPredictor
from confex.tensor_io import AttributionMap, ImageTensor

ALL_DISTINCT = ThresholdGridSpec(mode="all_distinct")


def _scores(kind: ConformityKind, values) -> list[ConformityScore]:
    return [
        ConformityScore(f"i{j}", kind, float(v), valid=math.isfinite(v))
        for j, v in enumerate(values)
    ]


# ---------------------------------------------------------------------------
# quantile rule

def test_worked_example_threshold_kind():
    values = [0.05 * (i + 1) for i in range(19)]  # 0.05 .. 0.95
    art = calibrate_threshold(_scores(ConformityKind("pixelwise"), values), 0.05)
    assert art.threshold == pytest.approx(0.10)
    assert not art.sentinel


def test_worked_example_summed_kind():
    values = list(range(1, 20))  # 1 .. 19
    art = calibrate_threshold(_scores(ConformityKind("summed"), values), 0.05)
    assert art.threshold == pytest.approx(18.0)


def test_single_score_half_epsilon():
    art = calibrate_threshold(_scores(ConformityKind("pixelwise"), [7.0]), 0.5)
    assert art.threshold == pytest.approx(7.0)


def test_tiny_epsilon_small_k_returns_min():
    values = [3.0, 1.0, 4.0, 1.5, 9.0]
    art = calibrate_threshold(_scores(ConformityKind("pixelwise"), values), 0.01)
    assert art.threshold == pytest.approx(1.0)


def test_all_sentinel_scores_gives_sentinel_threshold():
    kind = ConformityKind("pixelwise")
    scores = [ConformityScore(f"i{j}", kind, -math.inf, valid=False) for j in range(5)]
    with pytest.warns(UserWarning, match="sentinel"):
        art = calibrate_threshold(scores, 0.4)
    assert art.sentinel and art.threshold == -math.inf


def test_mixed_kinds_rejected():
    scores = _scores(ConformityKind("pixelwise"), [1.0]) + _scores(ConformityKind("summed"), [1.0])
    with pytest.raises(ValueError, match="mix"):
        calibrate_threshold(scores, 0.1)
    with pytest.raises(ValueError, match="empty"):
        calibrate_threshold([], 0.1)


def enumerate_threshold(values: np.ndarray, epsilon: float, summed: bool):
    """Independent enumeration of the defining inequality over the score set."""
    k = len(values)
    feasible = []
    for c in np.unique(values):
        count = (values <= c).sum() if summed else (values >= c).sum()
        if count + 1 >= (1 - epsilon) * (k + 1):
            feasible.append(c)
    if not feasible:
        return None
    return min(feasible) if summed else max(feasible)


@settings(max_examples=100)
@given(
    st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=60),
    st.floats(0.01, 0.99),
)
def test_quantile_rule_matches_enumeration(values, epsilon):
    arr = np.round(np.array(values), 3)  # encourage ties
    for name in ("pixelwise", "summed"):
        kind = ConformityKind(name)
        art = calibrate_threshold(_scores(kind, arr), epsilon)
        want = enumerate_threshold(arr, epsilon, summed=(name == "summed"))
        assert want is not None
        assert art.threshold == pytest.approx(want, rel=0, abs=0)
        # defining inequality holds at the returned threshold
        k = len(arr)
        if name == "summed":
            assert (arr <= art.threshold).sum() + 1 >= (1 - epsilon) * (k + 1)
        else:
            assert (arr >= art.threshold).sum() + 1 >= (1 - epsilon) * (k + 1)


def test_monotone_in_epsilon():
    rng = np.random.default_rng(3)
    values = rng.normal(size=200)
    epsilons = [0.01, 0.05, 0.1, 0.2, 0.4]
    thr = [calibrate_threshold(_scores(ConformityKind("pixelwise"), values), e).threshold for e in epsilons]
    assert all(a <= b + 1e-12 for a, b in zip(thr, thr[1:]))  # non-increasing in confidence
    thr_sum = [calibrate_threshold(_scores(ConformityKind("summed"), values), e).threshold for e in epsilons]
    assert all(a >= b - 1e-12 for a, b in zip(thr_sum, thr_sum[1:]))


# ---------------------------------------------------------------------------
# explanation masks

def _artifact(kind: ConformityKind, threshold: float, epsilon=0.05, **kw) -> CalibrationArtifact:
    return CalibrationArtifact(
        kind=kind, epsilon=epsilon, k=10, threshold=threshold, grid_spec=ALL_DISTINCT, **kw
    )


PHI = np.array([[0.9, 0.1], [0.2, 0.05]], dtype=np.float32)


def test_sentinel_threshold_keeps_everything():
    h = ConstantPredictor(scores=np.array([1.0, 0.0]))
    x = ImageTensor(np.ones((1, 2, 2), np.float32))
    m = explain(x, AttributionMap(PHI), _artifact(ConformityKind("pixelwise"), -math.inf), h)
    assert m.keep.all() and m.size_fraction == 1.0 and m.matches_full


def test_pixelwise_keep_example():
    h = ConstantPredictor(scores=np.array([1.0, 0.0]))
    x = ImageTensor(np.ones((1, 2, 2), np.float32))
    m = explain(x, AttributionMap(PHI), _artifact(ConformityKind("pixelwise"), 0.2), h)
    assert m.keep.tolist() == [[True, False], [True, False]]
    assert m.size_fraction == pytest.approx(0.5)


def test_summed_prefix_example():
    keep = summed_prefix_mask(PHI, 1.1)
    # descending 0.9, 0.2, 0.1, 0.05; running sums 0.9, 1.1, 1.2 -> two pixels
    assert keep.tolist() == [[True, False], [True, False]]


def test_summed_prefix_stops_at_first_violation_even_with_negatives():
    phi = np.array([2.0, 1.5, -3.0, 0.2])
    keep = summed_prefix_mask(phi, 2.0)
    # running sums 2.0, 3.5(stop); the later dip back under the bound is ignored
    assert keep.tolist() == [True, False, False, False]


def test_prefix_bound_below_top_score_keeps_nothing():
    assert not summed_prefix_mask(PHI, 0.5).any()


def test_paper_scale_size_fraction():
    h = ConstantPredictor(scores=np.array([1.0, 0.0]))
    phi = np.zeros((25, 40), np.float32)
    phi.ravel()[:136] = 1.0
    x = ImageTensor(np.ones((1, 25, 40), np.float32))
    m = explain(x, AttributionMap(phi), _artifact(ConformityKind("pixelwise"), 0.5), h)
    assert m.size_fraction == pytest.approx(0.136)


def test_reproduced_class_uses_masked_input():
    region = np.zeros((2, 2), dtype=bool)
    region[0, 0] = True
    h = RegionWitnessPredictor(region=region, threshold=0.5)
    x = ImageTensor(np.array([[[0.7, 0.0], [0.0, 0.0]]], np.float32))
    good = explain(
        x, AttributionMap(PHI), _artifact(ConformityKind("pixelwise"), float(np.float32(0.9))), h
    )
    assert good.matches_full and good.reproduced_class == 1
    # a threshold above every attribution empties the mask and flips the class
    bad = explain(x, AttributionMap(PHI), _artifact(ConformityKind("pixelwise"), 2.0), h)
    assert not bad.matches_full and bad.reproduced_class == 0


def test_nested_masks_superset_with_higher_confidence():
    h = ConstantPredictor(scores=np.array([1.0, 0.0]))
    x = ImageTensor(np.ones((1, 2, 2), np.float32))
    arts = [
        _artifact(ConformityKind("pixelwise"), 0.05, epsilon=0.01),  # 99% confidence
        _artifact(ConformityKind("pixelwise"), 0.2, epsilon=0.05),
    ]
    hi, lo = nested_masks(x, AttributionMap(PHI), arts, h)
    assert (hi.keep & lo.keep).sum() == lo.keep.sum()  # lo subset of hi
    assert hi.size_fraction >= lo.size_fraction


def test_nested_masks_identical_thresholds_identical_masks():
    h = ConstantPredictor(scores=np.array([1.0, 0.0]))
    x = ImageTensor(np.ones((1, 2, 2), np.float32))
    arts = [
        _artifact(ConformityKind("pixelwise"), 0.2, epsilon=0.01),
        _artifact(ConformityKind("pixelwise"), 0.2, epsilon=0.05),
    ]
    a, b = nested_masks(x, AttributionMap(PHI), arts, h)
    assert np.array_equal(a.keep, b.keep)


def test_nested_masks_rejects_mixed_kinds_or_provenance():
    h = ConstantPredictor(scores=np.array([1.0, 0.0]))
    x = ImageTensor(np.ones((1, 2, 2), np.float32))
    arts = [
        _artifact(ConformityKind("pixelwise"), 0.2),
        _artifact(ConformityKind("summed"), 0.2),
    ]
    with pytest.raises(ValueError, match="one conformity kind"):
        nested_masks(x, AttributionMap(PHI), arts, h)
    arts2 = [
        _artifact(ConformityKind("pixelwise"), 0.2, manifest_digest="aaa"),
        _artifact(ConformityKind("pixelwise"), 0.1, manifest_digest="bbb"),
    ]
    with pytest.raises(DataIntegrityError):
        nested_masks(x, AttributionMap(PHI), arts2, h)


def test_calibration_inference_consistency(rng):
    """Explaining a calibration instance at its own score reproduces the
    selection found during scoring."""
    region = np.zeros((3, 3), dtype=bool)
    region[0, :] = True
    h = RegionWitnessPredictor(region=region, threshold=0.3)
    x = ImageTensor(rng.uniform(0.4, 1.0, size=(1, 3, 3)).astype(np.float32))
    phi = AttributionMap(rng.uniform(0.0, 1.0, size=(3, 3)).astype(np.float32))

    s = score_pixelwise(x, phi, h, ALL_DISTINCT)
    m = explain(x, phi, _artifact(ConformityKind("pixelwise"), s.value), h)
    want = selection_at_threshold(phi.data, s.value, ConformityKind("pixelwise"))
    assert np.array_equal(m.keep, want)

    ssum = score_summed(x, phi, h, ALL_DISTINCT)  # positive scores: prefix == selection
    msum = explain(x, phi, _artifact(ConformityKind("summed"), ssum.value), h)
    assert msum.matches_full


def test_artifact_json_roundtrip(tmp_path):
    art = CalibrationArtifact(
        kind=ConformityKind("scaled", 0.4),
        epsilon=0.1,
        k=37,
        threshold=1.25,
        grid_spec=ThresholdGridSpec("quantile", 64),
        slic_digest="abc",
        manifest_digest="def",
    )
    path = tmp_path / "artifact.json"
    art.save(path)
    back = CalibrationArtifact.load(path)
    assert back == art
    payload = json.loads(path.read_text())
    assert set(payload) == {
        "kind", "rho", "epsilon", "k", "threshold", "tau_mode", "q",
        "slic_digest", "manifest_digest", "sentinel",
    }


def test_artifact_sentinel_roundtrip(tmp_path):
    art = _artifact(ConformityKind("summed"), math.inf)
    path = tmp_path / "artifact.json"
    art.save(path)
    back = CalibrationArtifact.load(path)
    assert back.sentinel and back.threshold == math.inf


def test_digest_mismatch_fails_loudly():
    art = _artifact(ConformityKind("superpixel", 0.5), 0.3, manifest_digest="aaa", slic_digest="s1")
    with pytest.raises(DataIntegrityError, match="manifest"):
        art.check_compatible("bbb", "s1")
    with pytest.raises(DataIntegrityError, match="segmentation"):
        art.check_compatible("aaa", "s2")
    art.check_compatible("aaa", "s1")
    art.check_compatible(None, None)  # unknown provenance is not an error


def test_save_and_load_masks(tmp_path):
    h = ConstantPredictor(scores=np.array([1.0, 0.0]))
    x = ImageTensor(np.ones((1, 2, 2), np.float32))
    masks = [
        explain(x, AttributionMap(PHI), _artifact(ConformityKind("pixelwise"), t), h, instance_id=f"m{i}")
        for i, t in enumerate((0.05, 0.2, 0.9))
    ]
    meta_path = save_masks(masks, tmp_path / "masks")
    rows = load_mask_metadata(meta_path)
    assert [r["instance_id"] for r in rows] == ["m0", "m1", "m2"]
    assert rows[1]["size_fraction"] == pytest.approx(0.5)
    from confex.tensor_io import read_tensor

    stored = read_tensor(tmp_path / "masks" / "m1.cfxt") > 0.5
    assert np.array_equal(stored, masks[1].keep)
