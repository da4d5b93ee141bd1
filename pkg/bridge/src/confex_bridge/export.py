"""Attribution exporter: images in, engine-ready interchange files out.

For each decodable image: normalize, predict, explain the predicted class,
sum attribution channels, and write CFXT tensors plus a manifest the engine
loads directly. The exported image tensors are already normalized, matching
the engine's convention that a zero baseline is the mean pixel.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .cfxt import write_tensor
from .explainers import run_explainer
from .models import BridgeConfig, infer_num_classes, load_model

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def _load_image(path: Path, config: BridgeConfig) -> torch.Tensor | None:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if config.image_size:
                im = im.resize((config.image_size, config.image_size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except Exception as exc:
        print(f"warning: skipping undecodable image {path.name}: {exc}", file=sys.stderr)
        return None
    mean = np.asarray(config.mean, dtype=np.float32).reshape(3, 1, 1)
    std = np.asarray(config.std, dtype=np.float32).reshape(3, 1, 1)
    chw = np.moveaxis(arr, -1, 0)
    return torch.from_numpy((chw - mean) / std)


def export(config: BridgeConfig, image_dir) -> Path:
    """Export a directory of images; returns the manifest path."""
    image_dir = Path(image_dir)
    paths = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise FileNotFoundError(f"no images found in {image_dir}")

    torch.manual_seed(config.seed)
    model = load_model(config.model, config.device)
    out = Path(config.out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "attributions").mkdir(exist_ok=True)

    items = []
    num_classes = None
    for path in paths:
        x = _load_image(path, config)
        if x is None:
            continue
        with torch.no_grad():
            scores = model(x[None])[0]
        if num_classes is None:
            num_classes = int(scores.shape[0])
        predicted = int(scores.argmax())
        attribution = run_explainer(config.explainer, model, x, predicted, seed=config.seed)
        spatial = attribution.sum(dim=0).numpy().astype(np.float32)  # channel sum

        stem = path.stem
        write_tensor(x.numpy().astype(np.float32), out / "images" / f"{stem}.cfxt")
        write_tensor(spatial, out / "attributions" / f"{stem}.cfxt")
        items.append(
            {
                "instance_id": stem,
                "image_path": f"images/{stem}.cfxt",
                "attribution_path": f"attributions/{stem}.cfxt",
                "cached_prediction": predicted,
            }
        )

    if not items:
        raise FileNotFoundError(f"no decodable images in {image_dir}")
    if num_classes is None or num_classes < 2:
        num_classes = infer_num_classes(model)
    manifest_path = out / "manifest.json"
    manifest_path.write_text(
        json.dumps(
            {"num_classes": num_classes, "baseline_policy": "zero", "items": items},
            indent=2,
        )
        + "\n"
    )
    return manifest_path
