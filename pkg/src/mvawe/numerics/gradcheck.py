import numpy as np

from mvawe.errors import UsageError
from mvawe.numerics.tensor import Tape, backward


def gradient_check(loss_fn, params, step=1e-5):
    """Largest relative disagreement between taped gradients and central differences.

    ``loss_fn`` takes no arguments and returns a scalar tensor computed from
    ``params``; it must be deterministic. The relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-12)``.
    """
    if step <= 0:
        raise UsageError("step must be positive")
    with Tape() as tape:
        loss = loss_fn()
    if float(loss_fn().data) != float(loss.data):
        raise UsageError("loss_fn is not deterministic")
    analytic = backward(tape, loss, params)

    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        a = analytic[p].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = float(loss_fn().data)
            flat[k] = orig - step
            down = float(loss_fn().data)
            flat[k] = orig
            num = (up - down) / (2.0 * step)
            err = abs(a[k] - num) / max(abs(a[k]), abs(num), 1e-12)
            worst = max(worst, err)
    return worst
