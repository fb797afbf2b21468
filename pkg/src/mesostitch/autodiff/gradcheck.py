"""Central finite-difference checks against the tape's gradients."""

import numpy as np

from .tensor import Tape


def tape_grads(fn, inputs):
    """Evaluate ``fn(*inputs)`` under a tape and return the input gradients."""
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        loss = fn(*inputs)
    tape.backward(loss, leaves=inputs)
    return [t.grad.copy() for t in inputs]


def fd_grad(fn, inputs, which, flat_index, step=1e-3):
    """Central difference of ``fn`` w.r.t. one element of ``inputs[which]``."""
    t = inputs[which]
    flat = t.data.reshape(-1)
    orig = flat[flat_index].copy()
    flat[flat_index] = orig + step
    up = float(np.asarray(fn(*inputs).data, dtype=np.float64))
    flat[flat_index] = orig - step
    down = float(np.asarray(fn(*inputs).data, dtype=np.float64))
    flat[flat_index] = orig
    return (up - down) / (2 * step)


def relative_error(analytic, numeric, floor=1e-6):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(fn, inputs, step=1e-3, n_probe=6, rng=None, floor=1e-6):
    """Compare tape gradients with central differences on a few random elements.

    Returns the worst relative error observed.
    """
    rng = rng or np.random.default_rng(0)
    grads = tape_grads(fn, inputs)
    worst = 0.0
    for i, (t, g) in enumerate(zip(inputs, grads)):
        k = min(n_probe, t.size)
        for j in rng.choice(t.size, size=k, replace=False):
            num = fd_grad(fn, inputs, i, int(j), step)
            worst = max(worst, relative_error(float(g.reshape(-1)[j]), num, floor))
    return worst
