"""Reference stdio prediction server backed by a linear softmax model.

Runnable as ``python -m confex.stdio_server <weights.cfxt>``; doubles as the
protocol's executable documentation and as the target for transcript-replay
tests. Real model servers (e.g. the torch bridge) implement the same frames.
"""

from __future__ import annotations

import argparse
import json
import struct
import sys

import numpy as np

from .predictor import PROTOCOL_VERSION
from .tensor_io import read_tensor


def _read_exact(stream, n: int) -> bytes | None:
    data = stream.read(n)
    if data is None or len(data) == 0:
        return None
    while len(data) < n:
        more = stream.read(n - len(data))
        if not more:
            return None
        data += more
    return data


def _send(stream, header: dict, payload: bytes = b"") -> None:
    blob = json.dumps(header, separators=(",", ":")).encode()
    stream.write(struct.pack("<I", len(blob)))
    stream.write(blob)
    if payload:
        stream.write(payload)
    stream.flush()


def serve(weights: np.ndarray, stdin=None, stdout=None) -> None:
    """Answer hello/predict frames until EOF; malformed frames get an error frame."""
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    w = weights.reshape(weights.shape[0], -1).astype(np.float64)
    num_classes = weights.shape[0]

    while True:
        raw_len = _read_exact(stdin, 4)
        if raw_len is None:
            return
        (header_len,) = struct.unpack("<I", raw_len)
        if header_len == 0 or header_len > 1 << 20:
            _send(stdout, {"op": "error", "msg": f"bad header length {header_len}"})
            continue
        blob = _read_exact(stdin, header_len)
        if blob is None:
            return
        try:
            header = json.loads(blob)
        except json.JSONDecodeError:
            _send(stdout, {"op": "error", "msg": "header is not JSON"})
            continue
        op = header.get("op")
        if op == "hello":
            _send(stdout, {"op": "hello", "version": PROTOCOL_VERSION, "num_classes": num_classes})
        elif op == "predict":
            try:
                n, c, h, wd = (int(header[k]) for k in ("n", "c", "h", "w"))
                count = n * c * h * wd
                if count <= 0 or count > 1 << 28:
                    raise ValueError(f"implausible payload size {count}")
            except (KeyError, ValueError) as exc:
                _send(stdout, {"op": "error", "msg": f"bad predict header: {exc}"})
                continue
            payload = _read_exact(stdin, 4 * count)
            if payload is None:
                return
            batch = np.frombuffer(payload, dtype="<f4").reshape(n, -1).astype(np.float64)
            if batch.shape[1] != w.shape[1]:
                _send(stdout, {"op": "error", "msg": "input dims do not match model"})
                continue
            logits = batch @ w.T
            z = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(z)
            probs = e / e.sum(axis=1, keepdims=True)
            _send(
                stdout,
                {"op": "scores", "n": n, "k": num_classes},
                probs.astype("<f4").tobytes(),
            )
        else:
            _send(stdout, {"op": "error", "msg": f"unknown op {op!r}"})


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="linear softmax stdio prediction server")
    parser.add_argument("weights", help="CFXT tensor of per-class weights (K,C,H,W)")
    args = parser.parse_args(argv)
    serve(read_tensor(args.weights))
    return 0


if __name__ == "__main__":
    sys.exit(main())
