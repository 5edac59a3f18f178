"""Acceptance criteria, one test per criterion (two share the training runs).

Each test records a short detail string; conftest prints a PASS/FAIL line
per criterion at the end of the session.  Runtime budgets are asserted too.
"""
import csv
import time

import numpy as np
import pytest

from oracles import AP_TABLE, ap_fraction, corners_to_center, labels_of, random_grid_boxes, raster_iou

from avdnet import cli
from avdnet.dataio import SynthConfig, load_manifest, load_pgm, save_pgm, synth_scene
from avdnet.detection import AnchorSet, decode, kmeans_anchors, nms
from avdnet.evaluation import average_precision, evaluate, iou
from avdnet.network import (
    TAP_NAMES,
    NetworkSpec,
    build_network,
    count_params,
    forward,
    init_weights,
    save_weights,
    stride2_stages,
)
from avdnet.rfav import QuantizedStack, layer_rfav, rfav
from avdnet.tensor import ConvParams, conv2d_forward
from avdnet.training import assign_targets, encode_box, gradient_check, ideal_logits

TINY_CFG = "input_size = 152\nclasses = 2\nwidths = 8, 16, 16, 32, 32, 64, 64\n"
# overfit run settings; the warm-up choice is explained in the decisions ledger
OVERFIT = dict(images=16, iters=2000, batch=4, lr=0.001, burn_in=200, seed=0)
EVAL_THRESH = "0.005"


def criterion(number, title):
    return pytest.mark.criterion(number, title)


# ---------------------------------------------------------------- 1-3 structure


@criterion(1, "parameter count")
def test_parameter_count(record_property):
    t = time.perf_counter()
    total = count_params(build_network(NetworkSpec()))
    elapsed = time.perf_counter() - t
    record_property("detail", f"{total:,} params, {abs(total / 13e6 - 1):.1%} from 13M, {elapsed:.2f} s")
    assert total == 11_392_868
    assert abs(total - 13e6) <= 0.15 * 13e6
    assert elapsed < 1.0


@criterion(1, "parameter count")
def test_parameter_count_cli(capsys):
    assert cli.main(["params"]) == 0
    assert capsys.readouterr().out.strip().splitlines()[-1] == "total 11392868"


@criterion(2, "model size")
def test_model_size(tmp_path, record_property):
    t = time.perf_counter()
    path = tmp_path / "default.weights"
    save_weights(init_weights(build_network(NetworkSpec()), 0), path)
    elapsed = time.perf_counter() - t
    size = path.stat().st_size
    record_property("detail", f"{size:,} bytes, {elapsed:.1f} s")
    assert 45e6 <= size <= 50e6
    assert elapsed < 10.0


@criterion(3, "output geometry")
def test_output_geometry(record_property):
    net = init_weights(build_network(NetworkSpec()), 0)
    x = np.random.default_rng(0).random((1, 3, 608, 608)).astype(np.float32)
    t = time.perf_counter()
    out = forward(net, x)
    elapsed = time.perf_counter() - t
    stages = stride2_stages(net)
    record_property("detail", f"output {out.shape[1:]}, stride-2 at {', '.join(stages)}, {elapsed:.1f} s")
    assert out.shape == (1, 4 * (5 + 4), 76, 76)
    assert len(stages) == 3
    assert np.isfinite(out).all()
    assert elapsed < 60.0


# ---------------------------------------------------------------- 4-5 numerics


@criterion(4, "gradient correctness")
def test_gradient_correctness(record_property):
    spec = NetworkSpec(64, 2, 4, (8, 16, 16, 32, 32, 32, 32))
    t = time.perf_counter()
    rep = gradient_check(spec, seed=0, eps=1e-5, samples=200, report=True)
    elapsed = time.perf_counter() - t
    record_property("detail", f"max rel err {rep.max_rel_error:.2e} over {rep.checked} params, {elapsed:.0f} s")
    assert rep.checked >= 200
    assert rep.max_rel_error < 1e-4
    assert elapsed < 300.0


@criterion(5, "stride-2 law")
def test_stride2_law(record_property):
    rng = np.random.default_rng(2024)
    t = time.perf_counter()
    bad = 0
    for _ in range(1000):
        n, c, d = (int(v) for v in rng.integers(1, 4, 3))
        h, w = (int(v) for v in rng.integers(3, 20, 2))
        k = int(rng.choice([1, 3]))
        x = rng.normal(size=(n, c, h, w)).astype(np.float32)
        wt = rng.normal(size=(d, c, k, k)).astype(np.float32)
        b = rng.normal(size=d).astype(np.float32) if rng.random() < 0.5 else None
        full = conv2d_forward(x, ConvParams(wt, b, 1, k // 2))
        half = conv2d_forward(x, ConvParams(wt, b, 2, k // 2))
        bad += not np.array_equal(half, full[:, :, ::2, ::2])
    elapsed = time.perf_counter() - t
    record_property("detail", f"{1000 - bad}/1000 exact, {elapsed:.1f} s")
    assert bad == 0
    assert elapsed < 60.0


# ---------------------------------------------------------------- 6, 10 overfit pipeline


def run_pipeline(root):
    """synth -> anchors -> train -> detect -> eval through the CLI."""
    t = time.perf_counter()
    data = root / "data"
    assert cli.main(["synth", "--out", str(data), "--images", str(OVERFIT["images"]), "--seed", "0",
                     "--size", "152", "--classes", "2"]) == 0
    manifest = str(data / "train.txt")
    (root / "tiny.cfg").write_text(TINY_CFG)
    assert cli.main(["anchors", "--data", manifest, "--k", "4", "--seed", "0", "--out", str(root / "anchors.txt")]) == 0
    weights = root / "model.weights"
    assert cli.main(["train", "--data", manifest, "--anchors", str(root / "anchors.txt"), "--cfg", str(root / "tiny.cfg"),
                     "--out", str(weights), "--iters", str(OVERFIT["iters"]), "--batch", str(OVERFIT["batch"]),
                     "--lr", str(OVERFIT["lr"]), "--burn-in", str(OVERFIT["burn_in"]),
                     "--seed", str(OVERFIT["seed"])]) == 0
    dets = root / "dets"
    dets.mkdir()
    for image in load_manifest(manifest).images:
        assert cli.main(["detect", "--weights", str(weights), "--image", str(image), "--thresh", EVAL_THRESH,
                         "--out-boxes", str(dets / (image.stem + ".txt"))]) == 0
    assert cli.main(["eval", "--weights", str(weights), "--data", manifest, "--thresh", EVAL_THRESH,
                     "--out-report", str(root / "report.txt")]) == 0
    return root, time.perf_counter() - t


@pytest.fixture(scope="module")
def overfit_runs(tmp_path_factory):
    return [run_pipeline(tmp_path_factory.mktemp(f"run{k}")) for k in range(2)]


def _losses(log_path):
    with open(log_path) as fh:
        return [float(row["loss"]) for row in csv.DictReader(fh)]


@pytest.mark.slow
@criterion(6, "overfit sanity")
def test_overfit_sanity(overfit_runs, record_property):
    root, elapsed = overfit_runs[0]
    losses = _losses(root / "model.weights.log.csv")
    ratio = losses[-1] / losses[9]
    report = (root / "report.txt").read_text().splitlines()
    mean_ap = float(report[-1].split("=")[1])
    record_property("detail", f"train mAP@0.5 {mean_ap:.3f}, loss {losses[9]:.2f} -> {losses[-1]:.4f} "
                              f"(ratio {ratio:.4f}), {elapsed / 60:.1f} min")
    assert len(losses) == OVERFIT["iters"]
    assert mean_ap >= 0.80
    assert ratio <= 0.10
    assert elapsed <= 30 * 60


@pytest.mark.slow
@criterion(10, "determinism")
def test_determinism(overfit_runs, record_property):
    (a, _), (b, _) = overfit_runs
    names = ["model.weights", "model.weights.log.csv", "anchors.txt", "model.weights.anchors"]
    names += sorted(f"dets/{p.name}" for p in (a / "dets").iterdir())
    differ = [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]
    record_property("detail", f"{len(names) - len(differ)}/{len(names)} files bit-identical")
    assert not differ


# ---------------------------------------------------------------- 7 evaluation


@criterion(7, "evaluation oracle")
def test_evaluation_oracle(record_property):
    assert len(AP_TABLE) >= 20
    worst = 0.0
    for seq, num_gt, expected in AP_TABLE:
        labels = labels_of(seq)
        assert ap_fraction(labels, num_gt) == expected
        worst = max(worst, abs(average_precision(labels, num_gt) - float(expected)))
    assert abs(average_precision(labels_of("TFT"), 2) - 0.8333333333333333) < 1e-9
    rng = np.random.default_rng(7)
    mismatched = sum(iou(corners_to_center(p), corners_to_center(q)) != raster_iou(p, q)
                     for p, q in zip(random_grid_boxes(rng, 1000), random_grid_boxes(rng, 1000)))
    record_property("detail", f"{len(AP_TABLE)} AP cases, worst error {worst:.1e}; "
                              f"{1000 - mismatched}/1000 IoU pairs exact")
    assert worst < 1e-9
    assert mismatched == 0


# ---------------------------------------------------------------- 8 decode/encode


@criterion(8, "decode/encode round-trip")
def test_round_trip_and_perfect_detector(record_property):
    rng = np.random.default_rng(8)
    grid, k = 19, 4
    anchors = AnchorSet(rng.uniform(0.02, 0.5, (k, 2)))
    per = 5 + 2
    worst = 0.0
    for _ in range(10_000):
        box = (rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.005, 1), rng.uniform(0.005, 1))
        a = int(rng.integers(k))
        row, col, t = encode_box(box, anchors.sizes[a], grid)
        raw = np.full((k * per, grid, grid), -50.0)
        raw[a * per:a * per + 4, row, col] = t
        raw[a * per + 4, row, col] = 50.0
        (d,) = decode(raw, anchors, 0.5)
        worst = max(worst, float(np.max(np.abs(np.subtract(d.box, box)))))
    maps = []
    for seed in range(3):
        data = [synth_scene(SynthConfig(seed=seed), i) for i in range(16)]
        fitted = kmeans_anchors([b.box[2:] for _, boxes in data for b in boxes], 4, seed=0)
        dets = [nms(decode(ideal_logits(assign_targets(boxes, fitted, 19, 2))[0], fitted)) for _, boxes in data]
        maps.append(evaluate(dets, [boxes for _, boxes in data], 2).map)
    record_property("detail", f"10000 boxes, worst coordinate error {worst:.1e}; perfect mAP {maps}")
    assert worst <= 1e-6
    assert maps == [1.0, 1.0, 1.0]


# ---------------------------------------------------------------- 9 rfav


def _mode_oracle(column):
    counts = {}
    for v in column:
        counts[int(v)] = counts.get(int(v), 0) + 1
    best = max(counts.values())
    return min(v for v, c in counts.items() if c == best)


@criterion(9, "RFAV laws")
def test_rfav_laws(tmp_path, record_property):
    t = time.perf_counter()
    rng = np.random.default_rng(9)
    for _ in range(1000):
        d, h, w = int(rng.integers(1, 40)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        q = rng.integers(0, int(rng.integers(2, 257)), (d, h, w)).astype(np.uint8)
        out = rfav(QuantizedStack(q))
        np.testing.assert_array_equal(rfav(QuantizedStack(q[rng.permutation(d)])), out)
        np.testing.assert_array_equal(rfav(QuantizedStack(q[:1])), q[0])
        i, j = int(rng.integers(h)), int(rng.integers(w))
        assert out[i, j] == _mode_oracle(q[:, i, j])
    # two values each seen once: the smaller one wins
    ties = rng.integers(0, 256, (1000, 2))
    ties = ties[ties[:, 0] != ties[:, 1]]
    got = rfav(QuantizedStack(ties.T.reshape(2, 1, -1).astype(np.uint8)))[0]
    np.testing.assert_array_equal(got, ties.min(axis=1))

    image, _ = synth_scene(SynthConfig(seed=0), 0)
    net = init_weights(build_network(NetworkSpec(152, 2, 4, (8, 16, 16, 32, 32, 64, 64))), 0)
    feats = {}
    net.forward(image[None], "infer", taps=feats)
    extents = []
    for layer in [n for n in TAP_NAMES if n.startswith("convres")]:
        path = tmp_path / f"{layer}.pgm"
        save_pgm(layer_rfav(net, image, layer), path)
        assert path.read_bytes().startswith(b"P5\n")
        img = load_pgm(path)
        assert img.shape == feats[layer].shape[2:]
        extents.append(f"{layer} {img.shape[1]}x{img.shape[0]}")
    elapsed = time.perf_counter() - t
    record_property("detail", f"1000 stacks; {', '.join(extents)}; {elapsed:.1f} s")
    assert elapsed < 120.0
