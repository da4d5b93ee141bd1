"""The black-box model boundary.

Everything downstream sees a model only as `predict(batch) -> class scores`.
Built-in synthetic predictors have analytically known sufficient pixel sets,
which is what makes the coverage experiments checkable; the subprocess client
speaks a small length-prefixed stdio protocol to real model servers.
"""

from __future__ import annotations

import json
import shlex
import struct
import subprocess
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import PredictorTransportError
from .tensor_io import ImageTensor, PredictionVector

PROTOCOL_VERSION = 1


def apply_baseline_mask(
    img: ImageTensor, keep: np.ndarray, baseline: ImageTensor | None = None
) -> ImageTensor:
    """Replace dropped pixels (all channels) by the baseline value.

    `keep` is an (H,W) boolean mask; `baseline=None` means the zero vector.
    Applying the same mask twice is a no-op.
    """
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != (img.height, img.width):
        raise ValueError(f"mask shape {keep.shape} != image spatial dims {(img.height, img.width)}")
    if baseline is None:
        base = np.zeros_like(img.data)
    else:
        if baseline.data.shape != img.data.shape:
            raise ValueError("baseline dims must match image dims")
        base = baseline.data
    out = np.where(keep[None, :, :], img.data, base)
    return ImageTensor(out)


def masked_batch(
    img: ImageTensor, keeps: np.ndarray, baseline: ImageTensor | None = None
) -> np.ndarray:
    """Stack of masked variants of one image; keeps is (N,H,W) boolean."""
    base = np.zeros_like(img.data) if baseline is None else baseline.data
    return np.where(keeps[:, None, :, :], img.data[None], base[None])


class SyntheticPredictor:
    """Base for in-process test models: pure, deterministic, batch-vectorized."""

    num_classes: int
    batch_limit: int = 1024

    def predict(self, batch: np.ndarray) -> np.ndarray:
        """(N,C,H,W) -> (N, num_classes) scores."""
        raise NotImplementedError

    def close(self) -> None:
        pass


@dataclass(eq=False)
class LinearPredictor(SyntheticPredictor):
    """Softmax over per-class inner products with fixed weight tensors."""

    weights: np.ndarray  # (K, C, H, W)
    batch_limit: int = 1024

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 4:
            raise ValueError("weights must be (K,C,H,W)")
        self.num_classes = self.weights.shape[0]

    def predict(self, batch: np.ndarray) -> np.ndarray:
        if batch.shape[1:] != self.weights.shape[1:]:
            raise ValueError(
                f"batch dims {batch.shape[1:]} do not match weights {self.weights.shape[1:]}"
            )
        logits = batch.reshape(batch.shape[0], -1).astype(np.float64) @ self.weights.reshape(
            self.num_classes, -1
        ).T
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


@dataclass(eq=False)
class RegionWitnessPredictor(SyntheticPredictor):
    """Two-class model whose evidence is the mean value inside a fixed region.

    The decision reads the masked image's raw values, so dropping region
    pixels genuinely removes evidence: class 1 iff the channel-averaged mean
    over the region exceeds `threshold`. Any kept subset of the region that
    pushes the (masked) mean over the threshold is sufficient, which gives
    coverage tests an exact ground truth.
    """

    region: np.ndarray  # (H,W) bool
    threshold: float = 0.5
    batch_limit: int = 4096
    num_classes: int = field(default=2, init=False)

    def __post_init__(self):
        self.region = np.ascontiguousarray(self.region, dtype=bool)
        if self.region.ndim != 2 or not self.region.any():
            raise ValueError("region must be a non-empty (H,W) boolean mask")

    def predict(self, batch: np.ndarray) -> np.ndarray:
        if batch.shape[2:] != self.region.shape:
            raise ValueError("batch spatial dims do not match region")
        values = batch.astype(np.float64).mean(axis=1)  # channel average
        evidence = values[:, self.region].mean(axis=1)
        scores = np.stack([np.full_like(evidence, self.threshold), evidence], axis=1)
        return scores


@dataclass(eq=False)
class ConstantPredictor(SyntheticPredictor):
    """Always returns the same scores; every mask preserves the prediction."""

    scores: np.ndarray
    batch_limit: int = 4096

    def __post_init__(self):
        self.scores = np.ascontiguousarray(self.scores, dtype=np.float64)
        self.num_classes = self.scores.shape[0]

    def predict(self, batch: np.ndarray) -> np.ndarray:
        return np.tile(self.scores, (batch.shape[0], 1))


# ---------------------------------------------------------------------------
# wire protocol (shared with external model servers)
#
# frame = [u32 LE header_len][JSON header][raw f32 LE payload]
# payload length is implied by the header:
#   {"op":"hello","version":1}                        -> no payload
#   {"op":"hello","version":1,"num_classes":k}        -> no payload
#   {"op":"predict","n":N,"c":C,"h":H,"w":W}          -> N*C*H*W floats
#   {"op":"scores","n":N,"k":K}                       -> N*K floats
#   {"op":"error","msg":...}                          -> no payload


def write_frame(stream, header: dict, payload: bytes = b"") -> None:
    blob = json.dumps(header, separators=(",", ":")).encode()
    stream.write(struct.pack("<I", len(blob)))
    stream.write(blob)
    if payload:
        stream.write(payload)
    stream.flush()


def _payload_floats(header: dict) -> int:
    op = header.get("op")
    if op == "predict":
        return int(header["n"]) * int(header["c"]) * int(header["h"]) * int(header["w"])
    if op == "scores":
        return int(header["n"]) * int(header["k"])
    return 0


def read_frame(stream) -> tuple[dict, bytes]:
    raw_len = stream.read(4)
    if len(raw_len) == 0:
        raise EOFError("stream closed")
    if len(raw_len) < 4:
        raise PredictorTransportError("truncated frame length", context=raw_len.hex())
    (header_len,) = struct.unpack("<I", raw_len)
    if header_len == 0 or header_len > 1 << 20:
        raise PredictorTransportError(f"implausible header length {header_len}")
    blob = stream.read(header_len)
    if len(blob) < header_len:
        raise PredictorTransportError("truncated header", context=blob[:64].hex())
    try:
        header = json.loads(blob)
    except json.JSONDecodeError as exc:
        raise PredictorTransportError(f"header is not JSON: {exc}", context=blob[:64].hex())
    n_floats = _payload_floats(header)
    payload = b""
    if n_floats:
        want = 4 * n_floats
        payload = stream.read(want)
        if len(payload) < want:
            raise PredictorTransportError(
                f"truncated payload ({len(payload)}/{want} bytes)", context=json.dumps(header)
            )
    return header, payload


class SubprocessPredictor:
    """Client for an external model server speaking the stdio frame protocol.

    Frames are totally ordered behind a lock, so concurrent callers are safe.
    The handshake is retried once with a fresh process, then fails hard; there
    is no silent fallback to a different predictor.
    """

    def __init__(self, command: list[str] | str, batch_limit: int = 64):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if batch_limit < 1:
            raise ValueError("batch_limit must be >= 1")
        self.batch_limit = batch_limit
        self._lock = threading.Lock()
        self._proc: subprocess.Popen | None = None
        self.num_classes: int = 0
        self._handshake_with_retry()

    def _spawn(self) -> None:
        self._proc = subprocess.Popen(
            self.command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
        )

    def _handshake_once(self) -> None:
        self._spawn()
        assert self._proc is not None
        write_frame(self._proc.stdin, {"op": "hello", "version": PROTOCOL_VERSION})
        header, _ = read_frame(self._proc.stdout)
        if header.get("op") != "hello" or header.get("version") != PROTOCOL_VERSION:
            raise PredictorTransportError("bad handshake reply", context=json.dumps(header))
        self.num_classes = int(header["num_classes"])

    def _handshake_with_retry(self) -> None:
        try:
            self._handshake_once()
        except (PredictorTransportError, EOFError, OSError, KeyError, ValueError):
            self.close()
            try:
                self._handshake_once()
            except (EOFError, OSError, KeyError, ValueError) as exc:
                self.close()
                raise PredictorTransportError(f"handshake failed twice: {exc}") from exc
            except PredictorTransportError:
                self.close()
                raise

    def predict(self, batch: np.ndarray) -> np.ndarray:
        batch = np.ascontiguousarray(batch, dtype=np.float32)
        if batch.ndim != 4:
            raise ValueError("batch must be (N,C,H,W)")
        n, c, h, w = batch.shape
        with self._lock:
            if self._proc is None or self._proc.poll() is not None:
                raise PredictorTransportError("server process is not running")
            try:
                write_frame(
                    self._proc.stdin,
                    {"op": "predict", "n": n, "c": c, "h": h, "w": w},
                    batch.astype("<f4", copy=False).tobytes(),
                )
                header, payload = read_frame(self._proc.stdout)
            except (EOFError, OSError) as exc:
                raise PredictorTransportError(f"server died mid-request: {exc}") from exc
        if header.get("op") == "error":
            raise PredictorTransportError("server error", context=header.get("msg", ""))
        if header.get("op") != "scores" or int(header.get("n", -1)) != n:
            raise PredictorTransportError("unexpected reply", context=json.dumps(header))
        k = int(header["k"])
        return np.frombuffer(payload, dtype="<f4").reshape(n, k).astype(np.float64)

    def close(self) -> None:
        proc, self._proc = self._proc, None
        if proc is not None:
            try:
                if proc.stdin:
                    proc.stdin.close()
                proc.terminate()
                proc.wait(timeout=5)
            except Exception:
                proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# batch helpers

def predict_scores(predictor, batch: np.ndarray) -> np.ndarray:
    """Batched scores with transparent splitting at the predictor's limit."""
    batch = np.asarray(batch)
    limit = max(1, int(getattr(predictor, "batch_limit", 1024)))
    if batch.shape[0] <= limit:
        return np.asarray(predictor.predict(batch), dtype=np.float64)
    parts = [
        np.asarray(predictor.predict(batch[i : i + limit]), dtype=np.float64)
        for i in range(0, batch.shape[0], limit)
    ]
    return np.concatenate(parts, axis=0)


def predict_classes(predictor, batch: np.ndarray) -> np.ndarray:
    """Lowest-index argmax classes for a batch."""
    return np.argmax(predict_scores(predictor, batch), axis=1)


def predict_batch(predictor, batch) -> list[PredictionVector]:
    """List-of-tensors convenience wrapper preserving input order."""
    if isinstance(batch, np.ndarray):
        stacked = batch
    else:
        arrs = [t.data if isinstance(t, ImageTensor) else np.asarray(t) for t in batch]
        shapes = {a.shape for a in arrs}
        if len(shapes) > 1:
            raise ValueError(f"batch tensors must share dims, got {sorted(shapes)}")
        stacked = np.stack(arrs)
    scores = predict_scores(predictor, stacked)
    return [PredictionVector(row) for row in scores]


def parse_predictor_spec(spec: str):
    """Build a predictor from a CLI spec string.

    Forms: ``synthetic:witness:<region.cfxt>:<theta>``,
    ``synthetic:linear:<weights.cfxt>``, ``synthetic:constant:<k>:<class>``,
    and ``subprocess:<command line>``.
    """
    from .tensor_io import read_tensor

    if spec.startswith("subprocess:"):
        return SubprocessPredictor(spec[len("subprocess:"):])
    if not spec.startswith("synthetic:"):
        raise ValueError(f"unrecognized predictor spec {spec!r}")
    rest = spec[len("synthetic:"):]
    parts = rest.split(":")
    kind = parts[0]
    if kind == "witness":
        if len(parts) != 3:
            raise ValueError("witness spec is synthetic:witness:<region.cfxt>:<theta>")
        region = read_tensor(parts[1]) > 0.5
        return RegionWitnessPredictor(region=region, threshold=float(parts[2]))
    if kind == "linear":
        if len(parts) != 2:
            raise ValueError("linear spec is synthetic:linear:<weights.cfxt>")
        return LinearPredictor(weights=read_tensor(parts[1]))
    if kind == "constant":
        if len(parts) != 3:
            raise ValueError("constant spec is synthetic:constant:<num_classes>:<class>")
        k, cls = int(parts[1]), int(parts[2])
        scores = np.zeros(k)
        scores[cls] = 1.0
        return ConstantPredictor(scores=scores)
    raise ValueError(f"unknown synthetic predictor kind {kind!r}")
