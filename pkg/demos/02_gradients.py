"""
Checking hand-written gradients
===============================

Every backward pass in the package is derived by hand, so it is checked
against central differences in float64.  Leaky ReLU has a kink at zero: when a
+-eps nudge flips the sign of some activation the difference quotient stops
being a derivative estimate, and those draws are replaced.
"""
import numpy as np

from avdnet.network import NetworkSpec
from avdnet.tensor import ConvParams, conv2d_backward, conv2d_forward
from avdnet.training import gradient_check

rng = np.random.default_rng(0)

# a single conv first: the adjoint of cross-correlation
x = rng.normal(size=(2, 3, 7, 7))
p = ConvParams(rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4), stride=2, padding=1)
r = rng.normal(size=conv2d_forward(x, p).shape)
gx, gw, gb = conv2d_backward(r, x, p)

eps = 1e-5
idx = (1, 2, 0, 1)
old = p.weights[idx]
p.weights[idx] = old + eps
up = np.sum(r * conv2d_forward(x, p))
p.weights[idx] = old - eps
down = np.sum(r * conv2d_forward(x, p))
p.weights[idx] = old
print(f"conv weight {idx}: analytic {gw[idx]:.10f}  numeric {(up - down) / (2 * eps):.10f}")

# then the whole detector, loss included
spec = NetworkSpec(64, 2, 4, (8, 16, 16, 32, 32, 32, 32))
for seed in range(3):
    rep = gradient_check(spec, seed=seed, samples=200, report=True)
    print(f"seed {seed}: max relative error {rep.max_rel_error:.2e} over {rep.checked} parameters "
          f"({rep.skipped_kinks} kink-straddling draws replaced)")
