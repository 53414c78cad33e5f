#!/usr/bin/env python3
"""Tour of the tensor library: building expressions, running the tape
backward, and sanity-checking one gradient against finite differences."""

import numpy as np

from voxseg import Tape, Tensor, backward, parameter

rng = np.random.default_rng(0)

# tensors are immutable float64 arrays; arithmetic builds a graph on the fly
a = Tensor(rng.normal(size=(3, 4)))
b = Tensor(rng.normal(size=(3, 4)))
c = (a * b + 2.0).sum()
print("scalar result:", c.item())

# leaves registered on a tape receive gradients
tape = Tape()
w = parameter(rng.normal(size=(4, 2)), name="w")
x = parameter(rng.normal(size=(5, 4)), name="x")
tape.watch(w, "w")
tape.watch(x, "x")

loss = ((x @ w) ** 2).sum()
grads = backward(tape, loss)
print("grad shapes:", {k: v.shape for k, v in grads.items()})

# central differences on one entry of w
h = 1e-6
w0 = w.numpy().copy()
bump = w0.copy()
bump[1, 1] += h
up = ((x.numpy() @ bump) ** 2).sum()
bump[1, 1] -= 2 * h
down = ((x.numpy() @ bump) ** 2).sum()
fd = (up - down) / (2 * h)
print(f"tape grad {grads['w'][1, 1]:+.8f}  finite diff {fd:+.8f}")
