"""
Overfitting a handful of synthetic scenes
=========================================

The cheapest end-to-end check of a detector: train the tiny configuration on
16 generated scenes until it memorizes them, then score it on the same scenes.
Small red cars and large white vans share the frame with shadows and tree
canopy.  The full 2000 iterations take around 15 minutes on one CPU core;
pass --iters for a shorter look.
"""
import argparse
import time

import numpy as np

from avdnet.dataio import SynthConfig, synth_scene
from avdnet.detection import decode, kmeans_anchors, nms
from avdnet.evaluation import evaluate
from avdnet.network import NetworkSpec, build_network, init_weights
from avdnet.training import TrainConfig, train_loop

parser = argparse.ArgumentParser(description=__doc__.split("\n")[1])
parser.add_argument("--iters", type=int, default=2000)
parser.add_argument("--scenes", type=int, default=16)
args = parser.parse_args()

data = [synth_scene(SynthConfig(seed=0), i) for i in range(args.scenes)]
truth = [boxes for _, boxes in data]
print(f"{args.scenes} scenes, {sum(map(len, truth))} vehicles, "
      f"{sum(b.class_id == 0 for bs in truth for b in bs)} of them small")

# four anchor shapes from the training boxes
anchors = kmeans_anchors([b.box[2:] for bs in truth for b in bs], k=4, seed=0)
print("anchors in pixels:", np.round(anchors.sizes * 152, 1).tolist())

net = init_weights(build_network(NetworkSpec(152, 2, 4, (8, 16, 16, 32, 32, 64, 64))), seed=0)
# a short quartic warm-up keeps the first steps at lr 1e-3 from blowing up
cfg = TrainConfig(initial_lr=0.001, burn_in=200, total_iterations=args.iters, seed=0)

start = time.perf_counter()


def show(it, loss):
    if it == 9 or (it + 1) % 100 == 0:
        print(f"iter {it + 1:>5}  loss {loss:9.4f}  {time.perf_counter() - start:6.0f} s", flush=True)


net, hist = train_loop(net, data, anchors, cfg, callback=show)
if len(hist) >= 10:
    print(f"final loss is {hist[-1][2] / hist[9][2]:.2%} of the iteration-10 loss")

out = net.forward(np.stack([img for img, _ in data]), "infer")
for thresh in (0.005, 0.25):
    dets = [nms(decode(o, anchors, thresh)) for o in out]
    print(f"\nconfidence >= {thresh}")
    print(evaluate(dets, truth, 2).report(), end="")
