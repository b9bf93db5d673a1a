"""
Convolutions and recurrent cells from scratch
==============================================

The same-padded convolutions are checked against a direct nested-loop sum,
then one ConvLSTM step is differentiated by hand and compared with central
finite differences.
"""
import time

import numpy as np

from dsrnowcast.cells import CellState, CellWeights, cell_backward, cell_forward
from dsrnowcast.tensor import conv2d_same

rng = np.random.default_rng(0)

# conv2d_same on a (C, H, W) input; the loop below is the textbook definition
x = rng.standard_normal((3, 9, 11))
w = rng.standard_normal((4, 3, 5, 5))
b = rng.standard_normal(4)
fast = conv2d_same(x, (w, b))
xp = np.pad(x, ((0, 0), (2, 2), (2, 2)))
slow = np.zeros_like(fast)
for o in range(4):
    for i in range(9):
        for j in range(11):
            slow[o, i, j] = b[o] + np.sum(w[o] * xp[:, i:i + 5, j:j + 5])
print("conv2d max abs difference vs loop: %.2e" % np.abs(fast - slow).max())

# throughput on a 166x394 continental grid with a small channel count
big = rng.standard_normal((8, 166, 394)).astype(np.float32)
kern = (rng.standard_normal((16, 8, 5, 5)).astype(np.float32), np.zeros(16, np.float32))
t = time.perf_counter()
conv2d_same(big, kern)
print("8->16 channel 5x5 conv on 166x394: %.3fs" % (time.perf_counter() - t))

# one ConvLSTM step in float64 and its analytic gradients
kind, act = "convlstm", "tanh"
wts = CellWeights.initialize(kind, 2, 3, (3, 3), rng, np.float64)
prev = CellState(rng.standard_normal((1, 3, 6, 6)) * 0.5, rng.standard_normal((1, 3, 6, 6)))
inp = rng.standard_normal((1, 2, 6, 6))
upstream = rng.standard_normal((1, 3, 6, 6))

state, cache = cell_forward(inp, prev, wts, act, keep_cache=True)
dx, dprev, grads = cell_backward(cache, wts, upstream, np.zeros_like(upstream))


def loss():
    s, _ = cell_forward(inp, prev, wts, act)
    return float(np.sum(s.H * upstream))


eps = 1e-5
for name in ("wx", "wh", "b"):
    arr = wts.params()[name]
    flat = arr.reshape(-1)
    picks = rng.choice(flat.size, 5, replace=False)
    worst = 0.0
    for k in picks:
        old = flat[k]
        flat[k] = old + eps
        up = loss()
        flat[k] = old - eps
        down = loss()
        flat[k] = old
        num = (up - down) / (2 * eps)
        worst = max(worst, abs(num - grads[name].reshape(-1)[k]) / max(abs(num), 1e-12))
    print("%-2s gradient: worst relative error on 5 entries %.1e" % (name, worst))
