"""Parameter update rules."""
import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


def _check(params, grads):
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if np.shape(g) != p.shape:
            raise ValueError(f"grad {i}: shape {np.shape(g)} != param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            name = getattr(p, "name", None) or f"#{i}"
            raise NonFiniteGradient(f"non-finite gradient for parameter {name}; update rejected")


def sgd_step(params, grads, lr, momentum=0.0, velocity=None):
    """In-place ``v = momentum*v + g; p -= lr*v``.

    ``velocity`` is a list of buffers (created when None) and is returned so
    callers can carry it between steps.  Nothing is modified when any
    gradient is non-finite.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    _check(params, grads)
    if velocity is None:
        velocity = [np.zeros(p.shape) for p in params]
    for p, g, v in zip(params, grads, velocity):
        if g is None:
            continue
        if momentum:
            v *= momentum
            v += g
            p.data -= lr * v
        else:
            p.data -= lr * g
    return velocity


class SGD:
    def __init__(self, params, lr=1e-4, momentum=0.0, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = None

    def step(self):
        grads = [p.grad for p in self.params]
        if self.weight_decay:
            grads = [None if g is None else g + self.weight_decay * p.data for p, g in zip(self.params, grads)]
        self.velocity = sgd_step(self.params, grads, self.lr, self.momentum, self.velocity)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self):
        grads = [p.grad for p in self.params]
        _check(self.params, grads)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def make_optimizer(kind, params, lr, momentum=0.0, weight_decay=0.0):
    if kind == "sgd":
        return SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    if kind == "adam":
        return Adam(params, lr=lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")
