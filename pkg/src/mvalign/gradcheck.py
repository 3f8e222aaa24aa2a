"""Central finite-difference checks for reverse-mode gradients."""
from dataclasses import dataclass, field

import numpy as np

from .tensor import no_grad


def rel_error(a, b, floor=1e-6):
    """``|a - b| / max(|a|, |b|, floor)`` over flattened vectors.

    The floor keeps gradients that are zero in exact arithmetic (a bias
    feeding batch normalisation, say) from turning finite-difference noise
    into a relative error of one.
    """
    a = np.ravel(a)
    b = np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


@dataclass
class GradcheckResult:
    errors: dict = field(default_factory=dict)
    directional: float = 0.0

    @property
    def max_error(self):
        return max([self.directional] + list(self.errors.values()))

    def passed(self, tol=1e-4):
        return self.max_error < tol


def _central(value, flat, i, h, retries):
    """Central difference at entry ``i``; shrinks ``h`` while the one-sided slopes disagree.

    A ReLU or max-pool switch inside ``[x - h, x + h]`` makes the forward
    and backward slopes differ by the jump in slope, which is far larger
    than the O(h) curvature term of a smooth function.
    """
    orig = flat[i]
    f0 = value()
    for _ in range(retries + 1):
        flat[i] = orig + h
        fp = value()
        flat[i] = orig - h
        fm = value()
        flat[i] = orig
        fwd, bwd = (fp - f0) / h, (f0 - fm) / h
        central = (fp - fm) / (2 * h)
        if abs(fwd - bwd) <= 1e-5 * max(abs(central), 1e-3):
            break
        h /= 10
    return central


def gradcheck(fn, tensors, h=1e-5, samples=None, rng=None, names=None, kink_retries=2):
    """Compare ``fn``'s reverse-mode gradients with central differences.

    ``fn`` must rebuild the graph and return a scalar tensor on each call.
    With ``samples`` set, only that many random entries per tensor are
    perturbed; a directional derivative along a random unit vector over all
    tensors is checked in every case.  Entries whose step straddles a kink
    are retried with a step ten times smaller, up to ``kink_retries`` times.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    names = names or [getattr(t, "name", None) or f"t{i}" for i, t in enumerate(tensors)]
    for t in tensors:
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]

    def value():
        with no_grad():
            return fn().item()

    result = GradcheckResult()
    for name, t, ga in zip(names, tensors, analytic):
        flat = t.data.reshape(-1)
        if samples is None or samples >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=samples, replace=False)
        num = np.array([_central(value, flat, i, h, kink_retries) for i in idx])
        result.errors[name] = rel_error(ga.reshape(-1)[idx], num)

    dirs = [rng.standard_normal(t.shape) for t in tensors]
    norm = np.sqrt(sum((d * d).sum() for d in dirs))
    dirs = [d / norm for d in dirs]
    saved = [t.data.copy() for t in tensors]
    for t, s, d in zip(tensors, saved, dirs):
        t.data[...] = s + h * d
    fp = value()
    for t, s, d in zip(tensors, saved, dirs):
        t.data[...] = s - h * d
    fm = value()
    for t, s in zip(tensors, saved):
        t.data[...] = s
    num = (fp - fm) / (2 * h)
    ana = sum((g * d).sum() for g, d in zip(analytic, dirs))
    result.directional = rel_error([ana], [num])
    return result
