"""Model loading for the bridge.

Specs: ``linear:<weights.pt>`` (a saved dict with a (K,C,H,W) float weight
tensor; softmax over inner products), ``jit:<model.pt>`` (a TorchScript
module), ``torchvision:<name>[:<state_dict.pt>]``. All models run in eval
mode on the configured device and map (N,C,H,W) floats to (N,K) scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class BridgeConfig:
    model: str
    device: str = "cpu"
    mean: tuple[float, ...] = (0.485, 0.456, 0.406)
    std: tuple[float, ...] = (0.229, 0.224, 0.225)
    explainer: str = "saliency"
    out_dir: str = "bridge_out"
    image_size: int | None = None
    batch_limit: int = 64
    seed: int = 0


class LinearSoftmaxModel(torch.nn.Module):
    """Softmax over per-class inner products; weights fixed at load time."""

    def __init__(self, weight: torch.Tensor):
        super().__init__()
        if weight.ndim != 4:
            raise ValueError("linear model weight must be (K,C,H,W)")
        self.register_buffer("weight", weight.float())

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        logits = x.reshape(x.shape[0], -1) @ self.weight.reshape(self.weight.shape[0], -1).T
        return torch.softmax(logits, dim=1)


def load_model(spec: str, device: str = "cpu") -> torch.nn.Module:
    kind, _, rest = spec.partition(":")
    if kind == "linear":
        payload = torch.load(rest, map_location=device, weights_only=True)
        weight = payload["weight"] if isinstance(payload, dict) else payload
        model = LinearSoftmaxModel(torch.as_tensor(weight))
    elif kind == "jit":
        model = torch.jit.load(rest, map_location=device)
    elif kind == "torchvision":
        import torchvision.models as tvm

        name, _, weights_path = rest.partition(":")
        model = getattr(tvm, name)(weights=None)
        if weights_path:
            state = torch.load(weights_path, map_location=device, weights_only=True)
            model.load_state_dict(state)
    else:
        raise ValueError(f"unrecognized model spec {spec!r}")
    model.eval()
    return model.to(device)


def infer_num_classes(model: torch.nn.Module, input_shape: tuple[int, int, int] | None = None) -> int:
    if hasattr(model, "num_classes"):
        return int(model.num_classes)
    if input_shape is None:
        input_shape = (3, 224, 224)
    with torch.no_grad():
        out = model(torch.zeros((1,) + tuple(input_shape)))
    return int(out.shape[1])
