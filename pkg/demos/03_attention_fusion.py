#!/usr/bin/env python3
"""Attention-gated mean-field fusion of two context maps, with the energy
bookkeeping that shows the iterates settling down."""

import numpy as np

from voxseg import ConvKernel, CrfConfig, fuse
from voxseg.tensor import Tensor

rng = np.random.default_rng(3)
c = 4

x_c = Tensor(rng.normal(size=(1, c, 6, 6, 6)))          # convolution context
x_g = Tensor(rng.normal(size=(1, c, 6, 6, 6)))          # graph context
kernel = ConvKernel.same(Tensor(rng.normal(scale=0.05, size=(c, c, 3, 3, 3))))

fused, reports = fuse(x_c, x_g, CrfConfig(kernel, iterations=10))
print("fused:", fused.shape)
print(f"{'it':>3} {'free energy':>14} {'|dH_c|':>12} {'pairwise':>12}")
for r in reports:
    print(f"{r.iteration:>3} {r.free_energy:>14.5f} {r.h_c_delta:>12.6f} {r.pairwise:>12.5f}")

# a zero kernel is perfectly neutral: the fused map is the convolution context
zero = ConvKernel.same(Tensor(np.zeros((c, c, 3, 3, 3))))
neutral, _ = fuse(x_c, x_g, CrfConfig(zero, iterations=5))
print("zero-kernel passthrough exact:", np.array_equal(neutral.numpy(), x_c.numpy()))
