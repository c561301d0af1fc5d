"""Shared test utilities: finite-difference Jacobian oracle and small rngs."""

from __future__ import annotations

import numpy as np

from stylemix.autodiff import Tensor


def check_grad(fn_tensor, arrays, wrt, step=1e-3, rel_tol=1e-2, abs_floor=1e-4, numeric_fn=None):
    """Check engine gradients against a central finite-difference Jacobian.

    fn_tensor maps a list of Tensors to an output Tensor. For every output
    element j, one backward pass yields the analytic row dout_j/dx; for every
    input element i, two float32 forward evaluations yield the numeric column.
    Comparing Jacobian entries elementwise (never summing finite-difference
    noise across outputs) keeps the oracle accurate well below abs_floor even
    in float32.

    numeric_fn, when given, replaces fn_tensor on the finite-difference side;
    this is how stop-gradient semantics are checked (the surrogate holds the
    blocked quantities frozen while the analytic side runs the real layer).

    Asserts rel err < rel_tol wherever |analytic| > abs_floor; returns the
    worst checked relative error.
    """
    if numeric_fn is None:
        numeric_fn = fn_tensor
    arrays = [np.array(a, dtype=np.float32) for a in arrays]

    out0 = fn_tensor([Tensor(a) for a in arrays])
    m = out0.data.size

    worst = 0.0
    for idx in wrt:
        n = arrays[idx].size

        # Analytic Jacobian rows: one backward per output element.
        analytic = np.zeros((m, n), dtype=np.float64)
        for j in range(m):
            tensors = [Tensor.param(a.copy()) for a in arrays]
            out = fn_tensor(tensors)
            seed = np.zeros(m, dtype=np.float32)
            seed[j] = 1.0
            (out.reshape(m) * seed).sum().backward()
            if tensors[idx].grad is not None:
                analytic[j] = tensors[idx].grad.reshape(-1)

        # Numeric Jacobian columns: two forwards per input element.
        numeric = np.zeros((m, n), dtype=np.float64)
        flat = arrays[idx].reshape(-1)
        for i in range(n):
            orig = flat[i]
            hi_x = np.float32(orig + step)
            lo_x = np.float32(orig - step)
            flat[i] = hi_x
            hi = numeric_fn([Tensor(a) for a in arrays]).data.astype(np.float64).reshape(-1)
            flat[i] = lo_x
            lo = numeric_fn([Tensor(a) for a in arrays]).data.astype(np.float64).reshape(-1)
            flat[i] = orig
            numeric[:, i] = (hi - lo) / (float(hi_x) - float(lo_x))

        mask = np.abs(analytic) > abs_floor
        if not mask.any():
            continue
        a_m = analytic[mask]
        n_m = numeric[mask]
        rel = np.abs(a_m - n_m) / np.maximum(np.abs(a_m), np.abs(n_m))
        worst = max(worst, float(rel.max()))
        assert rel.max() < rel_tol, (
            f"Jacobian mismatch on input {idx}: worst rel err {rel.max():.4g} "
            f"(analytic {a_m[rel.argmax()]:.6g} vs numeric {n_m[rel.argmax()]:.6g})"
        )
    return worst


def rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def signed_uniform(g: np.random.Generator, shape, lo=0.3, hi=1.2) -> np.ndarray:
    """Random values with |x| in [lo, hi]: keeps Jacobian entries clear of the
    float32 finite-difference noise floor without changing the op under test."""
    mag = g.uniform(lo, hi, size=shape)
    sign = np.where(g.random(shape) < 0.5, -1.0, 1.0)
    return (mag * sign).astype(np.float32)
