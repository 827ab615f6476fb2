"""Central finite-difference check of tape gradients, run in 64-bit."""

import numpy as np

from .tensor import Tensor, backward, precision


def gradcheck(fn, *arrays, eps=1e-3, seed=0, wrt=None):
    """Compare tape gradients of ``fn(*tensors)`` with central differences.

    Non-scalar outputs are reduced with a fixed random projection. Returns
    the worst normwise relative error ``max|analytic - numeric| / max|numeric|``
    over the checked inputs (all of them unless ``wrt`` lists indices).
    """
    # own stream: a projection equal to an input could sit in the op's null space
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6C7]))
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    proj = None

    def scalar(vals, track):
        nonlocal proj
        ts = [Tensor(v, requires_grad=track, dtype=np.float64) for v in vals]
        out = fn(*ts)
        if out.size == 1:
            return ts, out.reshape(())
        if proj is None:
            proj = rng.standard_normal(out.shape)
        return ts, (out * Tensor(proj, dtype=np.float64)).sum()

    with precision(np.float64):
        ts, loss = scalar(arrays, True)
        backward(loss, params=ts)
        worst = 0.0
        for i in wrt:
            analytic = ts[i].grad
            numeric = np.zeros_like(arrays[i])
            flat = arrays[i].reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                hi = scalar(arrays, False)[1].item()
                flat[j] = orig - eps
                lo = scalar(arrays, False)[1].item()
                flat[j] = orig
                numeric.reshape(-1)[j] = (hi - lo) / (2 * eps)
            scale = max(np.abs(numeric).max(), 1e-12)
            worst = max(worst, float(np.abs(analytic - numeric).max() / scale))
    return worst
