"""Adam over named parameter groups, with state remapping for density control."""
import numpy as np

from .errors import NumericalError


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-15):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lrs, iteration=None):
        """In-place update of every array in ``params`` that has an entry in ``lrs``."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                bad = np.argwhere(~np.isfinite(g))[0]
                raise NumericalError(
                    f"non-finite gradient at iteration {iteration}, group '{name}', "
                    f"Gaussian {int(bad[0])}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, lr in lrs.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def remap(self, origin):
        """Follow a densify/prune: row i copies old row ``origin[i]``; -1 starts at zero."""
        keep = origin >= 0
        for state in (self.m, self.v):
            for name, arr in state.items():
                new = np.zeros((len(origin),) + arr.shape[1:])
                new[keep] = arr[origin[keep]]
                state[name] = new
