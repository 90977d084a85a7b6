"""Central finite-difference verification of reverse-mode gradients."""

import numpy as np

from .autodiff import Tape


class GradCheckResult:
    def __init__(self, max_rel_err, param_index, coord, analytic, numeric):
        self.max_rel_err = max_rel_err
        self.param_index = param_index
        self.coord = coord
        self.analytic = analytic
        self.numeric = numeric

    def __repr__(self):
        return (
            f"GradCheckResult(max_rel_err={self.max_rel_err:.3e}, "
            f"param={self.param_index}, coord={self.coord}, "
            f"analytic={self.analytic:.6e}, numeric={self.numeric:.6e})"
        )


def finite_diff_check(f, params, eps=1e-5, atol=1e-6, max_coords=None):
    """Compare reverse-mode gradients of scalar f() against central differences.

    f is evaluated with the current contents of `params` (leaf tensors with
    requires_grad=True) and must be deterministic. Returns the worst scaled
    relative error and where it occurred.

    Per coordinate the error is |a - n| / max(|a|, |n|, scale) where `scale`
    is the largest gradient magnitude seen for that parameter (floored by
    `atol`): coordinates far below the parameter's gradient scale sit under
    the finite-difference noise floor and are measured against that scale
    rather than against themselves.

    max_coords, when set, probes at most that many evenly strided coordinates
    per parameter (full pipelines are too expensive to probe exhaustively).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise ArithmeticError("finite_diff_check: non-finite loss")
    tape.backward(loss)

    worst = GradCheckResult(0.0, -1, (), 0.0, 0.0)
    for pi, p in enumerate(params):
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        if max_coords is not None and flat.size > max_coords:
            stride = flat.size / max_coords
            coords = np.unique((np.arange(max_coords) * stride).astype(np.int64))
        else:
            coords = np.arange(flat.size)
        numeric = np.empty(coords.size)
        for ci, k in enumerate(coords):
            orig = flat[k]
            h = eps * max(1.0, abs(orig))
            flat[k] = orig + h
            lp = float(f().data)
            flat[k] = orig - h
            lm = float(f().data)
            flat[k] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise ArithmeticError(
                    f"finite_diff_check: non-finite probe at param {pi}, coord {k}"
                )
            numeric[ci] = (lp - lm) / (2.0 * h)
        scale = max(
            float(np.max(np.abs(analytic))) if analytic.size else 0.0,
            float(np.max(np.abs(numeric))) if numeric.size else 0.0,
            atol,
        )
        for ci, k in enumerate(coords):
            a, n = float(analytic[k]), float(numeric[ci])
            err = abs(a - n) / max(abs(a), abs(n), scale)
            if err > worst.max_rel_err:
                coord = np.unravel_index(k, p.data.shape)
                worst = GradCheckResult(err, pi, coord, a, n)
    return worst
