"""Full-batch gradient ascent with backtracking line search.

Shared by every trainer in the library.  Steps are only accepted when they
satisfy a (weak) Armijo increase condition, so the recorded objective trace
is nondecreasing.
"""

from __future__ import annotations

import numpy as np

__all__ = ["ascend"]


def ascend(value_and_grad, x0, iters, step0=0.1, shrink=0.5, grow=1.3,
           max_step=1e3, min_step=1e-14, armijo=1e-4, callback=None):
    """Maximize ``f`` given ``value_and_grad(x, need_grad) -> (f, g or None)``.

    Line-search trial points are evaluated with ``need_grad=False`` so that
    implementations can skip the expensive backward pass there.

    Parameters
    ----------
    x0 : initial parameter vector (1-D float array).
    iters : maximum number of accepted steps.
    step0 : initial step size; adapted multiplicatively between iterations.

    Returns
    -------
    (x, trace) : final parameters and the objective values at x0 and after
    every accepted step (length <= iters + 1, nondecreasing).
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = value_and_grad(x, True)
    if not np.isfinite(f):
        raise FloatingPointError("objective not finite at the initial point")
    trace = [float(f)]
    step = float(step0)
    for _ in range(int(iters)):
        gnorm_sq = float(np.dot(g, g))
        if gnorm_sq == 0.0:
            break

        def search(s):
            while s >= min_step:
                x_new = x + s * g
                f_new, _ = value_and_grad(x_new, False)
                if np.isfinite(f_new) and f_new >= f + armijo * s * gnorm_sq:
                    return s, x_new
                s *= shrink
            return None, None

        step_acc, x_new = search(step)
        if step_acc is None and step < step0:
            # the carried step may have shrunk past a rough patch; retry fresh
            step_acc, x_new = search(step0)
        if step_acc is None:
            break
        x = x_new
        f, g = value_and_grad(x, True)
        trace.append(float(f))
        if callback is not None:
            callback(x, f)
        step = min(step_acc * grow, max_step)
    return x, np.asarray(trace)
