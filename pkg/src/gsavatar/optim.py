"""Adam optimizer over lists of leaf tensors."""

import numpy as np


class Adam:
    """Standard Adam with bias correction.

    Parameters may be grouped with distinct learning rates by passing a list
    of (tensors, lr) groups; a flat list uses the single `lr`.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if params and isinstance(params[0], tuple):
            self.groups = [(list(ts), float(glr)) for ts, glr in params]
        else:
            self.groups = [(list(params), float(lr))]
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [
            [np.zeros_like(p.data) for p in ts] for ts, _ in self.groups
        ]
        self.v = [
            [np.zeros_like(p.data) for p in ts] for ts, _ in self.groups
        ]

    def params(self):
        for ts, _ in self.groups:
            yield from ts

    def zero_grad(self):
        for p in self.params():
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for gi, (ts, lr) in enumerate(self.groups):
            for pi, p in enumerate(ts):
                if p.grad is None:
                    continue
                g = p.grad
                if g.shape != p.data.shape:
                    raise ValueError(
                        f"gradient shape {g.shape} does not match parameter {p.data.shape}"
                    )
                m = self.m[gi][pi]
                v = self.v[gi][pi]
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                mhat = m / c1
                vhat = v / c2
                p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def state_arrays(self):
        """Flat list of state arrays for checkpointing, with the step count."""
        flat = []
        for gi in range(len(self.groups)):
            flat.extend(self.m[gi])
            flat.extend(self.v[gi])
        return flat, self.t

    def load_state_arrays(self, arrays, t):
        flat = iter(arrays)
        for gi, (ts, _) in enumerate(self.groups):
            self.m[gi] = [np.asarray(next(flat)).copy() for _ in ts]
            self.v[gi] = [np.asarray(next(flat)).copy() for _ in ts]
        self.t = int(t)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One functional Adam update.

    `state` is a dict with keys m, v (lists of arrays) and t (int); it is
    updated in place and returned alongside the new parameter arrays.
    """
    if state is None or not state:
        state = {
            "m": [np.zeros_like(p) for p in params],
            "v": [np.zeros_like(p) for p in params],
            "t": 0,
        }
    state["t"] += 1
    t = state["t"]
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        p = np.asarray(p)
        g = np.asarray(g)
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m = state["m"][i] = beta1 * state["m"][i] + (1 - beta1) * g
        v = state["v"][i] = beta2 * state["v"][i] + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        out.append(p - lr * mhat / (np.sqrt(vhat) + eps))
    return out, state
