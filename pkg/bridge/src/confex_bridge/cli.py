"""Bridge CLI: ``confex-bridge serve`` (stdio prediction server) and
``confex-bridge export`` (attribution interchange files)."""

from __future__ import annotations

import argparse
import sys

from .explainers import EXPLAINERS
from .models import BridgeConfig, infer_num_classes, load_model


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="confex-bridge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="answer engine predict frames over stdio")
    p.add_argument("--model", required=True, help="linear:<pt>|jit:<pt>|torchvision:<name>[:<pt>]")
    p.add_argument("--device", default="cpu")
    p.add_argument("--batch-limit", type=int, default=64)
    p.add_argument("--probe-shape", default="3,224,224",
                   help="C,H,W used to infer the class count of opaque models")

    p = sub.add_parser("export", help="write normalized images + attributions + manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True, help="directory of PNG/JPEG images")
    p.add_argument("--out", required=True)
    p.add_argument("--explainer", default="saliency", choices=list(EXPLAINERS))
    p.add_argument("--device", default="cpu")
    p.add_argument("--mean", default="0.485,0.456,0.406")
    p.add_argument("--std", default="0.229,0.224,0.225")
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        from .server import serve

        model = load_model(args.model, args.device)
        shape = tuple(int(v) for v in args.probe_shape.split(","))
        num_classes = infer_num_classes(model, shape)
        serve(model, num_classes, batch_limit=args.batch_limit, device=args.device)
        return 0

    from .export import export

    config = BridgeConfig(
        model=args.model,
        device=args.device,
        mean=tuple(float(v) for v in args.mean.split(",")),
        std=tuple(float(v) for v in args.std.split(",")),
        explainer=args.explainer,
        out_dir=args.out,
        image_size=args.image_size,
        seed=args.seed,
    )
    try:
        manifest = export(config, args.images)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"export: manifest -> {manifest}")
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
