"""
Checking gradients
==================

Every differentiable op is compared against central finite differences
in float64.
"""

import numpy as np

from volseg import nn
from volseg.gradcheck import TOLERANCE, run_suite
from volseg.tensor import Tensor, backward, grad_check, randn_tensor

# Backprop through a single convolution by hand.
x = randn_tensor((1, 1, 4, 4, 4), seed=1, dtype=np.float64, requires_grad=True)
w = randn_tensor((2, 1, 3, 3, 3), seed=2, dtype=np.float64, requires_grad=True)
b = Tensor(np.zeros(2), requires_grad=True)
out = nn.conv3d(x, nn.ConvParams(w, b))
backward(out.sum())
print("dL/db =", b.grad, "(each output channel has 64 voxels)")

err = grad_check(lambda x, w, b: nn.conv3d(x, nn.ConvParams(w, b)), [x, w, b])
print(f"conv3d relative error {err:.2e}")

# The full suite, a few random shapes per op.
for op, e in run_suite(cases=2).items():
    print(f"{op:20s} {e:.2e} {'ok' if e < TOLERANCE else 'FAIL'}")
