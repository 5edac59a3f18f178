"""
Modal-intensity feature visualization
=====================================

A layer with d channels is hard to look at.  Quantize the whole stack to
[0, 255] with one min/max, then at every pixel keep the intensity that occurs
most often across the d maps.  The result is one grayscale image per layer.

Writes one PGM per tap into ./rfav_out (or the directory given as argv[1]).
"""
import sys
from pathlib import Path

import numpy as np

from avdnet.dataio import SynthConfig, save_pgm, save_ppm, synth_scene
from avdnet.network import TAP_NAMES, NetworkSpec, build_network, init_weights
from avdnet.rfav import QuantizedStack, layer_rfav, rfav

out_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "rfav_out")
out_dir.mkdir(exist_ok=True)

# the rule on a toy column: values 5, 5, 200 at one pixel vote for 5
toy = QuantizedStack(np.array([5, 5, 200], np.uint8).reshape(3, 1, 1))
print("toy vote:", rfav(toy).item())

image, boxes = synth_scene(SynthConfig(seed=4), 0)
save_ppm(image, out_dir / "input.ppm")
print(f"scene with {len(boxes)} vehicles -> {out_dir / 'input.ppm'}")

spec = NetworkSpec(152, 2, 4, (8, 16, 16, 32, 32, 64, 64))
net = init_weights(build_network(spec), seed=0)
for layer in TAP_NAMES:
    vis = layer_rfav(net, image, layer)
    save_pgm(vis, out_dir / f"{layer}.pgm")
    values, counts = np.unique(vis, return_counts=True)
    print(f"{layer:<9} {vis.shape[1]:>3}x{vis.shape[0]:<3} distinct levels {len(values):>3}, "
          f"most common {values[counts.argmax()]}")
