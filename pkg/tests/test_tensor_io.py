import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from confex.errors import ManifestError, TensorFormatError
from confex.tensor_io import (
    AttributionMap,
    ImageTensor,
    PredictionVector,
    load_instance,
    load_manifest,
    read_tensor,
    save_manifest,
    write_tensor,
)

HEADER_LEN_3D = 4 + 3 + 3 * 4  # magic, version/dtype/ndims, three u32 dims


def test_payload_encoding_is_ieee754_little_endian(tmp_path):
    path = tmp_path / "t.cfxt"
    write_tensor(np.arange(4, dtype=np.float32).reshape(1, 2, 2), path)
    blob = path.read_bytes()
    assert blob[:4] == b"CFXT"
    assert blob[4] == 1 and blob[5] == 1 and blob[6] == 3
    payload = blob[HEADER_LEN_3D:]
    assert payload.hex() == "00000000" + "0000803f" + "00000040" + "00004040"


@given(
    st.lists(
        st.floats(
            min_value=-1e6, max_value=1e6, allow_nan=False, width=32
        ),
        min_size=1,
        max_size=48,
    )
)
def test_roundtrip_is_bit_identical(tmp_path_factory, values):
    arr = np.array(values, dtype=np.float32)
    path = tmp_path_factory.mktemp("rt") / "t.cfxt"
    write_tensor(arr, path)
    back = read_tensor(path)
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_non_finite_rejected(tmp_path):
    bad = np.array([[1.0, np.nan]], dtype=np.float32)
    with pytest.raises(ValueError, match="non-finite value"):
        write_tensor(bad, tmp_path / "t.cfxt")
    with pytest.raises(ValueError, match="non-finite"):
        AttributionMap(np.array([[np.inf]], dtype=np.float32))


def test_bad_magic_reports_offset(tmp_path):
    path = tmp_path / "t.cfxt"
    write_tensor(np.ones((2, 2), np.float32), path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(TensorFormatError, match="bad magic") as exc:
        read_tensor(path)
    assert exc.value.byte_offset == 0


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.cfxt"
    write_tensor(np.ones((2, 2), np.float32), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(TensorFormatError, match="payload shorter than dims imply"):
        read_tensor(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "t.cfxt"
    write_tensor(np.ones(3, np.float32), path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(TensorFormatError, match="trailing"):
        read_tensor(path)


def test_unsupported_version_and_dtype(tmp_path):
    path = tmp_path / "t.cfxt"
    write_tensor(np.ones(2, np.float32), path)
    blob = bytearray(path.read_bytes())
    blob[4] = 9
    path.write_bytes(bytes(blob))
    with pytest.raises(TensorFormatError, match="version"):
        read_tensor(path)
    blob[4] = 1
    blob[5] = 7
    path.write_bytes(bytes(blob))
    with pytest.raises(TensorFormatError, match="dtype"):
        read_tensor(path)


def test_image_tensor_validation():
    with pytest.raises(ValueError, match="3 dims|\\(C,H,W\\)"):
        ImageTensor(np.zeros((2, 2), np.float32))
    img = ImageTensor(np.zeros((3, 4, 5), np.float32))
    assert (img.channels, img.height, img.width) == (3, 4, 5)
    with pytest.raises(ValueError):
        img.data[0, 0, 0] = 1.0  # frozen


def test_prediction_vector_tie_break():
    pv = PredictionVector(np.array([0.5, 0.5, 0.1]))
    assert pv.predicted_class == 0
    assert PredictionVector(np.array([0.1, 0.5, 0.5])).predicted_class == 1


# ---------------------------------------------------------------------------
# manifests

def _write_dataset(tmp_path, n=2):
    items = []
    for i in range(n):
        write_tensor(np.full((1, 2, 2), float(i), np.float32), tmp_path / f"img{i}.cfxt")
        write_tensor(np.full((2, 2), float(i), np.float32), tmp_path / f"phi{i}.cfxt")
        items.append(
            {
                "instance_id": f"inst{i}",
                "image_path": f"img{i}.cfxt",
                "attribution_path": f"phi{i}.cfxt",
            }
        )
    save_manifest(tmp_path / "manifest.json", items, num_classes=2)
    return tmp_path / "manifest.json"


def test_manifest_roundtrip_preserves_order(tmp_path):
    path = _write_dataset(tmp_path, n=3)
    manifest = load_manifest(path)
    assert [it.instance_id for it in manifest.items] == ["inst0", "inst1", "inst2"]
    assert manifest.num_classes == 2
    assert manifest.baseline_policy.kind == "zero"
    assert manifest.digest


def test_manifest_duplicate_id_rejected(tmp_path):
    path = _write_dataset(tmp_path)
    payload = json.loads(path.read_text())
    payload["items"].append(dict(payload["items"][0]))
    path.write_text(json.dumps(payload))
    with pytest.raises(ManifestError, match="duplicate instance_id"):
        load_manifest(path)


def test_manifest_dangling_path_rejected(tmp_path):
    path = _write_dataset(tmp_path)
    payload = json.loads(path.read_text())
    payload["items"][0]["image_path"] = "missing.cfxt"
    path.write_text(json.dumps(payload))
    with pytest.raises(ManifestError, match="does not exist"):
        load_manifest(path)


def test_manifest_missing_key_rejected(tmp_path):
    path = _write_dataset(tmp_path)
    payload = json.loads(path.read_text())
    del payload["num_classes"]
    path.write_text(json.dumps(payload))
    with pytest.raises(ManifestError, match="num_classes"):
        load_manifest(path)


def test_attribution_dimension_mismatch_detected_on_load(tmp_path):
    path = _write_dataset(tmp_path)
    write_tensor(np.zeros((3, 3), np.float32), tmp_path / "phi0.cfxt")
    manifest = load_manifest(path)
    with pytest.raises(ManifestError, match="dims"):
        load_instance(manifest, manifest.items[0])


def test_manifest_digest_tracks_content(tmp_path):
    path = _write_dataset(tmp_path)
    d1 = load_manifest(path).digest
    payload = json.loads(path.read_text())
    payload["num_classes"] = 5
    path.write_text(json.dumps(payload))
    assert load_manifest(path).digest != d1
