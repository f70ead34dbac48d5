import numpy as np
import pytest

from protofew import numcore as nc


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def loss_through(fn, *arrays, weight_seed=0):
    """Wrap an op into a scalar loss: sum(op(*xs) * W) with a fixed random W.

    Returns (loss_fn_over_input_i builders, analytic gradient list). Used by
    the finite-difference checks so every output entry carries a distinct
    weight and VJP bugs cannot cancel.
    """
    out_probe = fn(*[nc.as_tensor(a) for a in arrays])
    w = np.random.default_rng(weight_seed).normal(0.0, 1.0, out_probe.shape)

    def scalar(*tensors):
        out = fn(*tensors)
        return nc.tsum(nc.mul(out, nc.as_tensor(w, dtype=out.dtype)))

    return scalar


def gradcheck_op(fn, arrays, step=1e-5, tol=1e-5, grad_floor=1e-8):
    """Analytic vs central-difference gradients for every input of ``fn``.

    All arrays must be float64. Returns the worst relative error seen.
    """
    scalar = loss_through(fn, *arrays)
    tensors = [nc.parameter(a, dtype=np.float64) for a in arrays]
    loss = scalar(*tensors)
    nc.backward(loss, tensors)
    worst = 0.0
    for i, t in enumerate(tensors):
        def f_of_i(x, i=i):
            args = [nc.as_tensor(a.data) for a in tensors]
            args[i] = x
            return scalar(*args)

        numeric = nc.finite_diff_gradient(f_of_i, nc.as_tensor(t.data), step=step)
        err = nc.relative_error(t.grad, numeric, grad_floor=grad_floor)
        worst = max(worst, err)
        assert err <= tol, f"input {i}: relative error {err:.3e} > {tol}"
    return worst
