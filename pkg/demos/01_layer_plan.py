"""
The detector's layer plan
=========================

Two plain convs, five ConvRes blocks and a linear 1x1 head.  Three stride-2
steps take a 608 px input down to the 76x76 grid, which is what lets objects
only a dozen pixels wide still own a cell.
"""
import numpy as np

from avdnet.network import NetworkSpec, build_network, count_params, forward, init_weights, layer_table, stride2_stages, weights_file_size

spec = NetworkSpec()  # 608 px input, 4 classes, 4 anchors
net = build_network(spec)

print(f"{'layer':<12}{'k':>3}{'s':>3}{'in':>6}{'out':>6}{'size':>6}{'params':>10}")
for row in layer_table(net):
    print(f"{row['name']:<12}{row['kernel']:>3}{row['stride']:>3}{row['c_in']:>6}{row['c_out']:>6}{row['size']:>6}{row['params']:>10}")

total = count_params(net)
print(f"\nlearnable parameters: {total:,}")
print(f"weights file: {weights_file_size(net) / 1e6:.1f} MB (running statistics included)")
print("stride-2 stages:", ", ".join(stride2_stages(net)))

# one real forward pass at full size takes a few seconds on a laptop CPU
init_weights(net, seed=0)
x = np.random.default_rng(0).random((1, 3, 608, 608)).astype(np.float32)
out = forward(net, x)
print("head output:", out.shape, "= (batch, anchors*(5+classes), grid, grid)")

# the same plan at desk scale
tiny = NetworkSpec(152, 2, 4, (8, 16, 16, 32, 32, 64, 64))
print(f"\ntiny variant: grid {tiny.grid}, head {tiny.head_channels} channels, "
      f"{count_params(build_network(tiny)):,} parameters")
