"""Stdio prediction server: the engine's wire protocol over a torch model.

Frames are [u32 LE header_len][JSON header][f32 LE payload]. The server
answers the hello handshake with its class count, then serves predict frames
until EOF. Inputs are used exactly as sent (the engine ships already
normalized tensors); malformed frames get an error frame and the loop
continues.
"""

from __future__ import annotations

import json
import struct
import sys

import numpy as np
import torch

PROTOCOL_VERSION = 1
MAX_PAYLOAD_FLOATS = 1 << 28


def _read_exact(stream, n: int) -> bytes | None:
    data = stream.read(n)
    if not data:
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


def serve(model: torch.nn.Module, num_classes: int, batch_limit: int = 64,
          device: str = "cpu", stdin=None, stdout=None) -> None:
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    model.eval()

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
                n, c, h, w = (int(header[k]) for k in ("n", "c", "h", "w"))
                count = n * c * h * w
                if count <= 0 or count > MAX_PAYLOAD_FLOATS:
                    raise ValueError(f"implausible payload size {count}")
            except (KeyError, ValueError) as exc:
                _send(stdout, {"op": "error", "msg": f"bad predict header: {exc}"})
                continue
            payload = _read_exact(stdin, 4 * count)
            if payload is None:
                return
            batch = np.frombuffer(payload, dtype="<f4").reshape(n, c, h, w)
            try:
                chunks = []
                with torch.no_grad():
                    for i in range(0, n, batch_limit):
                        x = torch.from_numpy(batch[i : i + batch_limit].copy()).to(device)
                        chunks.append(model(x).cpu().numpy())
                scores = np.concatenate(chunks, axis=0)
            except Exception as exc:  # model error: report, keep serving
                _send(stdout, {"op": "error", "msg": f"model failure: {exc}"})
                continue
            _send(
                stdout,
                {"op": "scores", "n": n, "k": int(scores.shape[1])},
                scores.astype("<f4").tobytes(),
            )
        else:
            _send(stdout, {"op": "error", "msg": f"unknown op {op!r}"})
