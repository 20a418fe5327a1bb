"""First-order optimisers over a dict of named parameter arrays."""
import numpy as np


class SGD:
    def update(self, params, grads, lr):
        return {k: params[k] - lr * grads[k] for k in params}


class Adam:
    """Adam with bias correction.

    State is created lazily from the first parameter dict it sees.
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def update(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k, np.zeros_like(p))
            v = self.v.get(k, np.zeros_like(p))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            out[k] = p - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


OPTIMIZERS = {"adam": Adam, "sgd": SGD}


def make_optimizer(name):
    try:
        return OPTIMIZERS[name]()
    except KeyError:
        raise ValueError(f"unknown optimizer {name!r}; choose from {sorted(OPTIMIZERS)}") from None
