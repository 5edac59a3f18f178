"""
Scoring detections
==================

Matching, the precision/recall staircase and all-point interpolated AP, on
small hand-made cases and then on a synthetic set with a perfect and a noisy
detector.
"""
import numpy as np

from avdnet.dataio import SynthConfig, synth_scene
from avdnet.detection import AnchorSet, Detection, decode, kmeans_anchors, nms
from avdnet.evaluation import average_precision, evaluate, pr_curve
from avdnet.training import assign_targets, ideal_logits

# TP, FP, TP with two objects: precisions 1, 1/2, 2/3
labels = [True, False, True]
curve = pr_curve(labels, 2)
print("staircase:", [(round(r, 3), round(p, 3)) for r, p in curve.points])
print("AP:", average_precision(labels, 2), "(0.5 * 1 + 0.5 * 2/3)")

cfg = SynthConfig(seed=1)
data = [synth_scene(cfg, i) for i in range(12)]
truth = [boxes for _, boxes in data]
anchors = kmeans_anchors([b.box[2:] for boxes in truth for b in boxes], k=4, seed=0)
print("anchors (w, h):", np.round(anchors.sizes, 3).tolist())

# perfect detector: the head output that decodes exactly to the targets
perfect = [nms(decode(ideal_logits(assign_targets(b, anchors, 19, 2))[0], anchors)) for b in truth]
print("perfect detector mAP:", evaluate(perfect, truth, 2).map)

# jitter the boxes and scores and add a false alarm per image
rng = np.random.default_rng(0)
noisy = []
for boxes in truth:
    row = [Detection(b.class_id, float(rng.uniform(0.3, 1.0)),
                     (b.cx + rng.normal(0, 0.01), b.cy + rng.normal(0, 0.01), b.w, b.h)) for b in boxes]
    row.append(Detection(int(rng.integers(2)), float(rng.uniform(0.3, 1.0)), (0.5, 0.5, 0.05, 0.05)))
    noisy.append(row)
print(evaluate(noisy, truth, 2).report(), end="")
