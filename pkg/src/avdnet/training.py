"""Targets, sum-of-squares detection loss, SGD and the training loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .evaluation import GroundTruthBox
from .detection import AnchorSet, _anchor_array, shape_iou, sigmoid, softmax
from .network import Network, NetworkSpec, build_network, init_weights, save_weights

log = logging.getLogger(__name__)

# offsets are kept strictly inside (0, 1) so their logit stays finite
_OFFSET_CLIP = 1e-9


@dataclass
class TrainConfig:
    batch_size: int = 4
    momentum: float = 0.9
    weight_decay: float = 0.0005
    initial_lr: float = 0.001
    lr_drop_iteration: int = 20000
    lr_drop_factor: float = 10.0
    total_iterations: int = 30000
    seed: int = 0
    burn_in: int = 0
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5
    lambda_obj: float = 1.0
    lambda_class: float = 1.0
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("initial_lr", "lr_drop_factor", "lambda_coord", "lambda_noobj", "lambda_obj", "lambda_class"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.burn_in < 0:
            raise ValueError(f"burn_in must be >= 0, got {self.burn_in}")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum must lie in [0, 1) and weight_decay must be >= 0")


@dataclass
class TargetTensor:
    """Training targets laid out like the head output.

    Per anchor ``a`` the channels ``a*(5+C) + [0..5+C)`` hold the center
    offsets within the cell (sigmoid-space), log size ratios to the anchor,
    the objectness target and the one-hot class.  ``resp`` flags the
    (anchor, row, col) slots that own a ground-truth box.
    """

    values: np.ndarray  # (B, A*(5+C), S, S)
    resp: np.ndarray  # (B, A, S, S) bool

    @property
    def num_anchors(self) -> int:
        return self.resp.shape[1]

    @classmethod
    def stack(cls, targets: Sequence["TargetTensor"]) -> "TargetTensor":
        return cls(np.concatenate([t.values for t in targets]), np.concatenate([t.resp for t in targets]))


def encode_box(box, anchor, grid: int):
    """Cell and raw head values that decode exactly to ``box``.

    Returns ``(row, col, (tx, ty, tw, th))``.
    """
    cx, cy, w, h = box
    col = min(int(cx * grid), grid - 1)
    row = min(int(cy * grid), grid - 1)
    ox = np.clip(cx * grid - col, _OFFSET_CLIP, 1 - _OFFSET_CLIP)
    oy = np.clip(cy * grid - row, _OFFSET_CLIP, 1 - _OFFSET_CLIP)
    tx = float(np.log(ox) - np.log1p(-ox))
    ty = float(np.log(oy) - np.log1p(-oy))
    tw = float(np.log(w / anchor[0]))
    th = float(np.log(h / anchor[1]))
    return row, col, (tx, ty, tw, th)


def assign_targets(gts: Sequence, anchors, grid: int, num_classes: int) -> TargetTensor:
    """Give each box to the cell holding its center and its best-shaped anchor.

    When two boxes want the same (cell, anchor) slot the larger one keeps it
    and the other moves to its next-best free anchor, or is dropped with a
    warning if none is left.  Result has a leading batch extent of 1.
    """
    sizes = _anchor_array(anchors)
    na = len(sizes)
    per = 5 + num_classes
    values = np.zeros((na * per, grid, grid))
    resp = np.zeros((na, grid, grid), bool)
    for g in gts:
        for name, v in zip(("cx", "cy", "w", "h"), g.box):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"ground-truth {name}={v} outside [0, 1]")
        if not 0 <= g.class_id < num_classes:
            raise ValueError(f"class id {g.class_id} outside [0, {num_classes})")
    order = sorted(range(len(gts)), key=lambda i: -gts[i].box[2] * gts[i].box[3])
    for idx in order:
        g = gts[idx]
        cx, cy, w, h = g.box
        ranking = np.argsort(-shape_iou([(w, h)], sizes)[0], kind="stable")
        row, col = min(int(cy * grid), grid - 1), min(int(cx * grid), grid - 1)
        slot = next((int(a) for a in ranking if not resp[a, row, col]), None)
        if slot is None:
            log.warning("dropping box %s: all %d anchors at cell (%d, %d) taken", g.box, na, row, col)
            continue
        _, _, (_, _, tw, th) = encode_box(g.box, sizes[slot], grid)
        base = slot * per
        values[base + 0, row, col] = cx * grid - col
        values[base + 1, row, col] = cy * grid - row
        values[base + 2, row, col] = tw
        values[base + 3, row, col] = th
        values[base + 4, row, col] = 1.0
        values[base + 5 + g.class_id, row, col] = 1.0
        resp[slot, row, col] = True
    return TargetTensor(values[None], resp[None])


def ideal_logits(target: TargetTensor, confidence: float = 20.0) -> np.ndarray:
    """Head output a perfect detector would emit for ``target``.

    Responsible slots reproduce the encoded box with objectness and class
    logits at ``+confidence``; every other objectness sits at ``-confidence``.
    """
    b, ch, s, _ = target.values.shape
    na = target.num_anchors
    t = target.values.reshape(b, na, ch // na, s, s)
    resp = target.resp
    out = np.zeros_like(t)
    off = np.clip(t[:, :, 0:2], _OFFSET_CLIP, 1 - _OFFSET_CLIP)
    out[:, :, 0:2] = np.where(resp[:, :, None], np.log(off) - np.log1p(-off), 0.0)
    out[:, :, 2:4] = t[:, :, 2:4]
    out[:, :, 4] = np.where(resp, confidence, -confidence)
    out[:, :, 5:] = np.where(resp[:, :, None], confidence * (2 * t[:, :, 5:] - 1), 0.0)
    return out.reshape(b, ch, s, s)


def detection_loss(pred: np.ndarray, target: TargetTensor, cfg: TrainConfig):
    """Sum-of-squares detection loss over a batch and its gradient w.r.t. ``pred``.

    Coordinates compare post-sigmoid centers and log-space sizes; objectness
    pulls responsible slots to 1 and the rest to 0; class probabilities
    (softmax) are regressed onto the one-hot target.  Divided by batch size.
    """
    if pred.shape != target.values.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match target {target.values.shape}")
    b, ch, s, _ = pred.shape
    na = target.num_anchors
    per = ch // na
    p = pred.astype(np.float64).reshape(b, na, per, s, s)
    t = target.values.reshape(b, na, per, s, s)
    resp = target.resp.astype(np.float64)
    grad = np.zeros_like(p)

    sxy = sigmoid(p[:, :, 0:2])
    dxy = (sxy - t[:, :, 0:2]) * resp[:, :, None]
    dwh = (p[:, :, 2:4] - t[:, :, 2:4]) * resp[:, :, None]
    coord = cfg.lambda_coord * (np.sum(dxy * dxy) + np.sum(dwh * dwh))
    grad[:, :, 0:2] = 2 * cfg.lambda_coord * dxy * sxy * (1 - sxy)
    grad[:, :, 2:4] = 2 * cfg.lambda_coord * dwh

    so = sigmoid(p[:, :, 4])
    noresp = 1.0 - resp
    obj = cfg.lambda_obj * np.sum(resp * (so - 1) ** 2)
    noobj = cfg.lambda_noobj * np.sum(noresp * so * so)
    dso = 2 * cfg.lambda_obj * resp * (so - 1) + 2 * cfg.lambda_noobj * noresp * so
    grad[:, :, 4] = dso * so * (1 - so)

    probs = softmax(p[:, :, 5:], axis=2)
    dp = (probs - t[:, :, 5:]) * resp[:, :, None]
    cls = cfg.lambda_class * np.sum(dp * dp)
    gp = 2 * cfg.lambda_class * dp
    grad[:, :, 5:] = probs * (gp - np.sum(gp * probs, axis=2, keepdims=True))

    loss = (coord + obj + noobj + cls) / b
    grad /= b
    return float(loss), grad.reshape(pred.shape).astype(pred.dtype)


def _decayed(name: str) -> bool:
    return not (name.endswith(".bn.scale") or name.endswith(".bn.shift"))


def sgd_step(net: Network, grads: dict, lr: float, cfg: TrainConfig) -> Network:
    """Momentum SGD with L2 decay, in place.

    ``v <- momentum*v - lr*(grad + decay*w)``; ``w <- w + v``.  Batch-norm
    scale and shift are not decayed.  Velocities live in ``net.velocity``.
    """
    params = net.parameters()
    missing = set(grads) - set(params)
    if missing:
        raise KeyError(f"gradients for unknown parameters: {sorted(missing)}")
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if _decayed(name) and cfg.weight_decay:
            g = g + cfg.weight_decay * w
        v = net.velocity.get(name)
        if v is None:
            v = net.velocity[name] = np.zeros_like(w)
        v *= cfg.momentum
        v -= lr * g
        w += v
    return net


def lr_schedule(iteration: int, cfg: TrainConfig) -> float:
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    if iteration < cfg.burn_in:
        # quartic warm-up as in darknet; off by default
        return cfg.initial_lr * ((iteration + 1) / cfg.burn_in) ** 4
    if iteration < cfg.lr_drop_iteration:
        return cfg.initial_lr
    return cfg.initial_lr / cfg.lr_drop_factor


def loss_and_grads(net: Network, images: np.ndarray, target: TargetTensor, cfg: TrainConfig,
                   update_stats: bool = True):
    """Train-mode forward, loss and parameter gradients for one batch."""
    caches: list = []
    out = net.forward(images, "train", caches=caches, update_stats=update_stats)
    loss, grad = detection_loss(out, target, cfg)
    return loss, net.backward(grad, caches)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches drawn from successive permutations."""
    pool: list = []
    while True:
        while len(pool) < batch_size:
            pool.extend(rng.permutation(n).tolist())
        yield pool[:batch_size]
        pool = pool[batch_size:]


def train_loop(net: Network, dataset: Sequence, anchors, cfg: TrainConfig,
               log_path: Union[str, Path, None] = None,
               callback: Optional[Callable[[int, float], None]] = None):
    """Train ``net`` in place on ``(image, boxes)`` pairs.

    Images must already be ``(3, N, N)`` at the network input size.  Returns
    ``(net, log)`` with one ``(iteration, lr, loss)`` row per iteration.
    Shuffling is driven by ``cfg.seed`` alone.
    """
    if len(dataset) == 0:
        raise ValueError("training needs at least one image")
    spec = net.spec
    grid = spec.grid if spec else net.forward(dataset[0][0][None]).shape[-1]
    num_classes = spec.num_classes if spec else None
    targets = [assign_targets(gts, anchors, grid, num_classes) for _, gts in dataset]
    images = np.stack([np.asarray(img, net.dtype) for img, _ in dataset])
    rng = np.random.default_rng(cfg.seed)
    stream = _batches(len(dataset), cfg.batch_size, rng)
    history = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "lr", "loss"])
    try:
        for it in range(cfg.total_iterations):
            idx = next(stream)
            lr = lr_schedule(it, cfg)
            loss, grads = loss_and_grads(net, images[idx], TargetTensor.stack([targets[i] for i in idx]), cfg)
            if not np.isfinite(loss):
                raise FloatingPointError(f"loss became {loss} at iteration {it}")
            sgd_step(net, grads, lr, cfg)
            history.append((it, lr, loss))
            if writer is not None:
                writer.writerow([it, f"{lr:.8g}", f"{loss:.9g}"])
            if callback is not None:
                callback(it, loss)
            if cfg.checkpoint_every and cfg.checkpoint_dir and (it + 1) % cfg.checkpoint_every == 0:
                Path(cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
                save_weights(net, Path(cfg.checkpoint_dir) / f"checkpoint_{it + 1:06d}.weights")
    finally:
        if fh is not None:
            fh.close()
    return net, history


def write_loss_log(history, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["iteration", "lr", "loss"])
        for it, lr, loss in history:
            out.writerow([it, f"{lr:.8g}", f"{loss:.9g}"])


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def relative_error(analytic, numeric, floor: float = 1e-8):
    analytic = np.asarray(analytic, np.float64)
    numeric = np.asarray(numeric, np.float64)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def sample_indices(params: dict, samples: int, rng: np.random.Generator) -> list[tuple[str, tuple]]:
    """At least one entry per tensor, the rest spread by tensor size."""
    names = list(params)
    picks = [(n, tuple(int(i) for i in np.unravel_index(rng.integers(params[n].size), params[n].shape)))
             for n in names]
    sizes = np.array([params[n].size for n in names], np.float64)
    for k in rng.choice(len(names), max(0, samples - len(picks)), p=sizes / sizes.sum()):
        n = names[k]
        picks.append((n, tuple(int(i) for i in np.unravel_index(rng.integers(params[n].size), params[n].shape))))
    return picks


def _activation_signs(net: Network, caches: list) -> np.ndarray:
    """Sign pattern of every leaky-ReLU input recorded in ``caches``."""
    from .network import ConvResBlock

    parts = []
    for layer, cache in zip(net.layers, caches):
        pairs = zip(layer.layers, cache) if isinstance(layer, ConvResBlock) else [(layer, cache)]
        for sub, c in pairs:
            if sub.activation:
                parts.append((c[3] >= 0).ravel())
    return np.concatenate(parts) if parts else np.zeros(0, bool)


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped_kinks: int


def gradient_check(spec: Union[NetworkSpec, Network], seed: int = 0, eps: float = 1e-5, samples: int = 200,
                   inputs: Optional[np.ndarray] = None,
                   loss_fn: Optional[Callable[[np.ndarray], tuple]] = None,
                   batch: int = 2, report: bool = False):
    """Max relative error between backprop and central differences.

    Works in float64 on a copy of the network.  Without ``loss_fn`` the
    detection loss is used against random boxes; ``loss_fn(out)`` must
    return ``(loss, dloss/dout)``.  Batch norm runs in train mode with the
    running statistics frozen.

    A parameter whose +-eps stencil flips the sign of any leaky-ReLU input
    straddles a kink, where a central difference is not a derivative
    estimate; such draws are replaced until ``samples`` smooth ones are
    checked.  ``report=True`` returns a :class:`GradCheckReport`.
    """
    if not eps > 0:
        raise ValueError(f"perturbation must be positive, got {eps}")
    rng = np.random.default_rng(seed)
    if isinstance(spec, Network):
        net = spec.astype(np.float64)
    else:
        if spec.input_size > 64:
            raise ValueError(f"gradient_check wants a tiny network (input <= 64), got {spec.input_size}")
        net = init_weights(build_network(spec, np.float64), seed)
    if inputs is None:
        if net.spec is None:
            raise ValueError("inputs are required for a network without a spec")
        n = net.spec.input_size
        inputs = rng.random((batch, 3, n, n))
    inputs = np.asarray(inputs, np.float64)

    if loss_fn is None:
        if net.spec is None:
            raise ValueError("loss_fn is required for a network without a spec")
        cfg = TrainConfig()
        s, c = net.spec.grid, net.spec.num_classes
        anchors = AnchorSet([(0.05, 0.05), (0.1, 0.08), (0.12, 0.2), (0.3, 0.25)][: net.spec.num_anchors])
        tgts = []
        for _ in range(inputs.shape[0]):
            boxes = [GroundTruthBox(int(rng.integers(c)), *rng.uniform(0.1, 0.9, 2), *rng.uniform(0.05, 0.4, 2))
                     for _ in range(3)]
            tgts.append(assign_targets(boxes, anchors, s, c))
        target = TargetTensor.stack(tgts)

        def loss_fn(out):
            return detection_loss(out, target, cfg)

    def evaluate(with_grads: bool):
        caches: list = []
        out = net.forward(inputs, "train", caches=caches, update_stats=False)
        loss, g = loss_fn(out)
        grads = net.backward(g, caches) if with_grads else None
        return loss, grads, _activation_signs(net, caches)

    _, grads, _ = evaluate(True)
    params = net.parameters()
    worst, checked, skipped = 0.0, 0, 0
    pending = sample_indices(params, samples, rng)
    while checked < samples:
        if not pending:
            if skipped > 20 * samples:
                raise RuntimeError(f"only {checked} of {samples} parameters avoid activation kinks")
            pending = sample_indices(params, 1, rng)[-1:]
        name, idx = pending.pop(0)
        arr = params[name]
        orig = arr[idx]
        arr[idx] = orig + eps
        up, _, sign_up = evaluate(False)
        arr[idx] = orig - eps
        down, _, sign_down = evaluate(False)
        arr[idx] = orig
        if not np.array_equal(sign_up, sign_down):
            skipped += 1
            continue
        numeric = (up - down) / (2 * eps)
        worst = max(worst, float(relative_error(grads[name][idx], numeric)))
        checked += 1
    if report:
        return GradCheckReport(worst, checked, skipped)
    return worst
