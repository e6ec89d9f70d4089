# Checking the autograd engine
#
# Every differentiable op has a hand-written backward pass. Central finite
# differences in float64 are the ground truth. Coordinates where a step of
# eps would cross a kink (ReLU at zero, L1 at a tie) are skipped, since the
# finite difference is meaningless there.

import numpy as np

from pfnl3d import autograd as ag
from pfnl3d.autograd import Tensor, grad_check
from pfnl3d.gradcheck import run_suite

# %% A single op by hand

rng = np.random.default_rng(0)
x = rng.standard_normal((1, 2, 4, 4, 4))
w = rng.standard_normal((3, 2, 3, 3, 3))
report = grad_check(lambda a, b: ag.conv3d(a, b), [x, w], eps=1e-3, tol=1e-4, name="conv3d")
print(report)

# %% A deliberately wrong backward is caught


def bad_square(a: Tensor) -> Tensor:
    out = ag.mul(a, a)
    right = out._backward
    out._backward = lambda g: [h * 0.5 for h in right(g)]  # off by a factor of two
    return out


print(grad_check(lambda a: bad_square(a), [rng.standard_normal((1, 1, 2, 2, 2))], name="broken"))

# %% The full suite: every op on three seeds plus the whole network

reports = run_suite()
for r in reports:
    print(r)
print(f"{sum(r.passed for r in reports)}/{len(reports)} passed")
