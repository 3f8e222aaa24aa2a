"""Layer containers on top of :mod:`mvalign.tensor`."""
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


def Parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Holds parameters, buffers and child modules in attribute order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, key, value):
        self._buffers[key] = value
        object.__setattr__(self, key, value)

    def add_module(self, key, module):
        setattr(self, key, module)
        return module

    def named_parameters(self, prefix=""):
        for k, p in self._params.items():
            yield prefix + k, p
        for k, m in self._children.items():
            yield from m.named_parameters(prefix + k + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for k, b in self._buffers.items():
            yield prefix + k, b
        for k, m in self._children.items():
            yield from m.named_buffers(prefix + k + ".")

    def modules(self):
        yield self
        for m in self._children.values():
            yield from m.modules()

    def train(self, mode=True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        out = OrderedDict()
        for k, p in self.named_parameters():
            out[k] = p.data.copy()
        for k, b in self.named_buffers():
            out[k] = b.copy()
        return out

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"missing entries: {sorted(missing)[:5]}")
        for k, arr in state.items():
            if k in params:
                if params[k].shape != arr.shape:
                    raise ValueError(f"{k}: shape {arr.shape} != {params[k].shape}")
                params[k].data[...] = arr
            elif k in buffers:
                buffers[k][...] = arr
            else:
                raise KeyError(f"unexpected entry {k}")

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_normal(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, padding=None, rng=None, bias=True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Parameter(he_normal(rng, (cout, cin, k, k), cin * k * k))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, c, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(c))
        self.beta = Parameter(np.zeros(c))
        self.register_buffer("running_mean", np.zeros(c))
        self.register_buffer("running_var", np.ones(c))

    def forward(self, x):
        return T.batchnorm(x, self.gamma, self.beta, self.eps, self.running_mean, self.running_var,
                           training=self.training, momentum=self.momentum)


class Linear(Module):
    def __init__(self, fin, fout, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(he_normal(rng, (fout, fin), fin))
        self.bias = Parameter(np.zeros(fout))

    def forward(self, x):
        return T.fully_connected(x, self.weight, self.bias)
