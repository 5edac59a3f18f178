"""Command-line workflows: synth, anchors, train, detect, eval, rfav, params."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dataio
from .detection import DEFAULT_CONF_THRESH, DEFAULT_NMS_THRESH, AnchorSet, Detection, decode, kmeans_anchors, nms, write_detections
from .evaluation import evaluate, write_report
from .network import DEFAULT_WIDTHS, TAP_NAMES, NetworkSpec, build_network, count_params, init_weights, layer_table, load_weights, save_weights
from .rfav import layer_rfav
from .training import TrainConfig, train_loop

CFG_KEYS = ("input_size", "classes", "widths", "num_anchors")


class CliError(Exception):
    """Runtime failure reported with exit code 1."""


def parse_cfg(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    values = {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    for n, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{p}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CFG_KEYS:
            raise CliError(f"{p}:{n}: unknown key {key!r}; allowed: {', '.join(CFG_KEYS)}")
        try:
            if key == "widths":
                values[key] = tuple(int(v) for v in value.replace(",", " ").split())
            else:
                values[key] = int(value)
        except ValueError:
            raise CliError(f"{p}:{n}: bad value for {key}: {value!r}") from None
    return values


def spec_from_cfg(cfg: dict, num_anchors: Optional[int] = None) -> NetworkSpec:
    anchors = num_anchors if num_anchors is not None else cfg.get("num_anchors", 4)
    if "num_anchors" in cfg and num_anchors is not None and cfg["num_anchors"] != num_anchors:
        raise CliError(f"config says {cfg['num_anchors']} anchors but the anchor file has {num_anchors}")
    try:
        return NetworkSpec(cfg.get("input_size", 608), cfg.get("classes", 4), anchors,
                           tuple(cfg.get("widths", DEFAULT_WIDTHS)))
    except ValueError as exc:
        raise CliError(str(exc)) from None


def write_cfg(spec: NetworkSpec, path) -> None:
    Path(path).write_text(
        f"input_size = {spec.input_size}\nclasses = {spec.num_classes}\n"
        f"widths = {', '.join(map(str, spec.widths))}\nnum_anchors = {spec.num_anchors}\n",
        encoding="utf-8",
    )


def echo(pairs: dict) -> None:
    """Print the resolved configuration to stderr."""
    for key, value in pairs.items():
        if isinstance(value, (tuple, list)):
            value = ",".join(map(str, value))
        print(f"{key} = {value}", file=sys.stderr)


def _spec_echo(spec: NetworkSpec) -> dict:
    return {"input_size": spec.input_size, "classes": spec.num_classes, "widths": spec.widths,
            "num_anchors": spec.num_anchors, "grid": spec.grid}


def _sidecar(weights, suffix: str, given) -> Path:
    path = Path(given) if given else Path(str(weights) + suffix)
    if not path.exists():
        raise CliError(f"{path} not found; pass it explicitly or keep the file written next to the weights")
    return path


def _load_model(args):
    weights = Path(args.weights)
    if not weights.exists():
        raise CliError(f"weights file not found: {weights}")
    anchors = AnchorSet.load(_sidecar(weights, ".anchors", args.anchors))
    spec = spec_from_cfg(parse_cfg(_sidecar(weights, ".cfg", args.cfg)), len(anchors))
    return load_weights(spec, weights), spec, anchors


def _detect_image(net, spec, anchors, image, thresh, nms_thresh):
    """Detections for one image, boxes as fractions of the original image."""
    canvas, tf = dataio.letterbox(image, spec.input_size)
    raw = net.forward(canvas[None], "infer")[0]
    dets = []
    for d in nms(decode(raw, anchors, thresh, spec.num_classes), nms_thresh):
        x, y, w, h = tf.box_to_original(d.box)
        dets.append(Detection(d.class_id, d.score, (x / tf.orig_w, y / tf.orig_h, w / tf.orig_w, h / tf.orig_h)))
    return dets


_PALETTE = np.array([[1, 0, 0], [0, 1, 0], [0, 0.4, 1], [1, 1, 0], [1, 0, 1], [0, 1, 1]], np.float32)


def draw_boxes(image: np.ndarray, dets: Sequence[Detection], thickness: int = 2) -> np.ndarray:
    """Copy of ``image`` with ``thickness``-px outlines around each detection."""
    out = image.copy()
    _, h, w = out.shape
    for d in dets:
        cx, cy, bw, bh = d.box
        x0 = int(np.clip(round((cx - bw / 2) * w), 0, w - 1))
        x1 = int(np.clip(round((cx + bw / 2) * w) - 1, 0, w - 1))
        y0 = int(np.clip(round((cy - bh / 2) * h), 0, h - 1))
        y1 = int(np.clip(round((cy + bh / 2) * h) - 1, 0, h - 1))
        color = _PALETTE[d.class_id % len(_PALETTE)][:, None, None]
        t = thickness
        out[:, y0:y0 + t, x0:x1 + 1] = color
        out[:, max(y0, y1 - t + 1):y1 + 1, x0:x1 + 1] = color
        out[:, y0:y1 + 1, x0:x0 + t] = color
        out[:, y0:y1 + 1, max(x0, x1 - t + 1):x1 + 1] = color
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = dataio.SynthConfig(image_size=args.size, num_classes=args.classes, seed=args.seed)
    echo({"out": args.out, "images": args.images, "seed": args.seed, "size": args.size, "classes": args.classes})
    manifest = dataio.write_synth_dataset(cfg, args.images, args.out)
    print(manifest)
    return 0


def cmd_anchors(args) -> int:
    manifest = dataio.load_manifest(args.data)
    echo({"data": args.data, "k": args.k, "seed": args.seed, "out": args.out})
    shapes = []
    for i in range(len(manifest)):
        # shapes are measured on the letterboxed canvas the network sees
        image = dataio.load_ppm(manifest.images[i])
        _, tf = dataio.letterbox(image, args.input_size) if args.input_size else (None, None)
        for b in dataio.parse_annotations(manifest.annotation_path(i)):
            shapes.append((tf.gt_to_network(b) if tf else b).box[2:])
    anchors = kmeans_anchors(shapes, args.k, seed=args.seed)
    anchors.save(args.out)
    print(open(args.out).read(), end="")
    return 0


def cmd_train(args) -> int:
    anchors = AnchorSet.load(args.anchors)
    spec = spec_from_cfg(parse_cfg(args.cfg) if args.cfg else {}, len(anchors))
    tcfg = TrainConfig(batch_size=args.batch, initial_lr=args.lr, total_iterations=args.iters, seed=args.seed,
                       burn_in=args.burn_in, checkpoint_every=args.checkpoint_every,
                       checkpoint_dir=str(Path(args.out).parent) if args.checkpoint_every else None)
    echo({**_spec_echo(spec), "data": args.data, "anchors": args.anchors, "out": args.out, "iters": tcfg.total_iterations,
          "lr": tcfg.initial_lr, "batch": tcfg.batch_size, "seed": tcfg.seed, "momentum": tcfg.momentum,
          "weight_decay": tcfg.weight_decay, "burn_in": tcfg.burn_in, "lr_drop_iteration": tcfg.lr_drop_iteration})
    manifest = dataio.load_manifest(args.data)
    data = [(img, boxes) for img, boxes, _ in dataio.load_dataset(manifest, spec.input_size)]
    for _, boxes in data:
        for b in boxes:
            if b.class_id >= spec.num_classes:
                raise CliError(f"annotation class {b.class_id} but the config has {spec.num_classes} classes")
    net = init_weights(build_network(spec), args.seed)
    log_path = args.log or str(args.out) + ".log.csv"
    every = max(1, args.iters // 20)

    def progress(it, loss):
        if it % every == 0 or it == args.iters - 1:
            print(f"iter {it} loss {loss:.4f}", file=sys.stderr)

    net, history = train_loop(net, data, anchors, tcfg, log_path=log_path, callback=progress)
    save_weights(net, args.out)
    anchors.save(str(args.out) + ".anchors")
    write_cfg(spec, str(args.out) + ".cfg")
    print(f"weights {args.out}\nlog {log_path}")
    return 0


def cmd_detect(args) -> int:
    net, spec, anchors = _load_model(args)
    echo({**_spec_echo(spec), "weights": args.weights, "image": args.image, "thresh": args.thresh, "nms": args.nms})
    image = dataio.load_ppm(args.image)
    dets = _detect_image(net, spec, anchors, image, args.thresh, args.nms)
    write_detections(dets, args.out_boxes)
    if args.out_image:
        dataio.save_ppm(draw_boxes(image, dets), args.out_image)
    print(f"{len(dets)} detections -> {args.out_boxes}")
    return 0


def cmd_eval(args) -> int:
    net, spec, anchors = _load_model(args)
    echo({**_spec_echo(spec), "weights": args.weights, "data": args.data, "iou": args.iou, "thresh": args.thresh,
          "nms": args.nms})
    manifest = dataio.load_manifest(args.data)
    dets, gts = [], []
    for i, path in enumerate(manifest.images):
        dets.append(_detect_image(net, spec, anchors, dataio.load_ppm(path), args.thresh, args.nms))
        gts.append(dataio.parse_annotations(manifest.annotation_path(i)))
    result = evaluate(dets, gts, spec.num_classes, args.iou)
    write_report(result, args.out_report, args.curves)
    print(result.report(), end="")
    return 0


def cmd_rfav(args) -> int:
    net, spec, _ = _load_model(args)
    echo({**_spec_echo(spec), "weights": args.weights, "image": args.image, "layer": args.layer, "out": args.out})
    canvas, _ = dataio.letterbox(dataio.load_ppm(args.image), spec.input_size)
    image = layer_rfav(net, canvas, args.layer)
    dataio.save_pgm(image, args.out)
    print(f"{args.layer} {image.shape[1]}x{image.shape[0]} -> {args.out}")
    return 0


def cmd_params(args) -> int:
    spec = spec_from_cfg(parse_cfg(args.cfg) if args.cfg else {})
    echo(_spec_echo(spec))
    net = build_network(spec)
    print(f"{'layer':<14}{'kernel':>8}{'stride':>8}{'in':>6}{'out':>6}{'size':>12}{'params':>12}")
    for row in layer_table(net):
        print(f"{row['name']:<14}{row['kernel']:>8}{row['stride']:>8}{row['c_in']:>6}{row['c_out']:>6}"
              f"{row['size']:>12}{row['params']:>12}")
    print(f"total {count_params(net)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avdnet", description="Small-vehicle aerial detector workflows.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("synth", help="write a synthetic aerial dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=152, help="image side in pixels")
    p.add_argument("--classes", type=int, default=2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("anchors", help="k-means anchor shapes from a manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input-size", type=int, default=None,
                   help="measure shapes after letterboxing to this size (matters for non-square images)")
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("train", help="train from scratch")
    p.add_argument("--data", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--cfg")
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=30000)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--burn-in", type=int, default=0, help="iterations of quartic learning-rate warm-up")
    p.add_argument("--log", help="loss log CSV (default WEIGHTS.log.csv)")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    def model_args(p):
        p.add_argument("--weights", required=True)
        p.add_argument("--cfg", help="network config (default WEIGHTS.cfg)")
        p.add_argument("--anchors", help="anchor file (default WEIGHTS.anchors)")

    p = sub.add_parser("detect", help="detect vehicles in one PPM image")
    model_args(p)
    p.add_argument("--image", required=True)
    p.add_argument("--thresh", type=float, default=DEFAULT_CONF_THRESH)
    p.add_argument("--nms", type=float, default=DEFAULT_NMS_THRESH)
    p.add_argument("--out-boxes", required=True)
    p.add_argument("--out-image")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="per-class AP and mAP over a manifest")
    model_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--thresh", type=float, default=DEFAULT_CONF_THRESH)
    p.add_argument("--nms", type=float, default=DEFAULT_NMS_THRESH)
    p.add_argument("--out-report", required=True)
    p.add_argument("--curves", help="prefix for per-class PR curve CSVs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rfav", help="modal-intensity visualization of one layer")
    model_args(p)
    p.add_argument("--image", required=True)
    p.add_argument("--layer", required=True, choices=TAP_NAMES)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rfav)

    p = sub.add_parser("params", help="per-layer table and parameter total")
    p.add_argument("--cfg")
    p.set_defaults(func=cmd_params)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # usage errors exit 2 with the synopsis on stderr
    try:
        return args.func(args)
    except (CliError, OSError, ValueError, FloatingPointError) as exc:
        print(f"avdnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
