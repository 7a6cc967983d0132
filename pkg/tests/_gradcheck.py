"""Finite-difference gradient oracle shared by the test modules.

Runs the checked function in float64 ("shadow mode") through the same op
implementations, perturbs one input element at a time with central
differences, and compares against the tape gradients.
"""

import numpy as np

from diformer.autodiff import Tape, Tensor, backward


def close(a, b, rtol, atol):
    return abs(a - b) <= atol + rtol * max(abs(a), abs(b))


def fd_check(fn, arrays, h=1e-3, rtol=1e-4, atol=1e-7):
    """Compare tape gradients of scalar fn(*tensors) against central differences.

    arrays: list of float64 numpy arrays treated as differentiable inputs.
    Returns the worst (analytic, numeric) pair for diagnostics.
    """
    tensors = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*tensors)
    backward(loss, tape)
    analytic = [t.grad.copy() for t in tensors]

    worst = (0.0, 0.0, 0.0)  # (abs diff, analytic, numeric)
    for ai, base in enumerate(arrays):
        work = [a.astype(np.float64).copy() for a in arrays]
        it = np.nditer(base, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = work[ai][idx]
            work[ai][idx] = orig + h
            fp = fn(*[Tensor(w) for w in work]).item()
            work[ai][idx] = orig - h
            fm = fn(*[Tensor(w) for w in work]).item()
            work[ai][idx] = orig
            num = (fp - fm) / (2 * h)
            an = analytic[ai][idx]
            if abs(an - num) > worst[0]:
                worst = (abs(an - num), an, num)
            assert close(an, num, rtol, atol), (
                f"grad mismatch input {ai} at {idx}: analytic {an!r} vs fd {num!r}"
            )
    return worst
