"""Reverse-mode gradients, a hand-written Adam and finite-difference checks.

Parameters are plain ``dict[str, torch.Tensor]`` of float64 leaves. Gradients
come from torch autograd; the optimiser and the checker are written here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch


class NonFiniteGradientError(FloatingPointError):
    pass


def gradient(loss_fn, params: dict) -> dict:
    """d loss / d param for every entry; unused parameters get zeros.

    Raises :class:`NonFiniteGradientError` naming the offending parameters.
    """
    names = list(params)
    leaves = [params[n] if params[n].requires_grad else params[n].detach().requires_grad_(True) for n in names]
    loss = loss_fn(dict(zip(names, leaves)))
    if not torch.isfinite(loss):
        raise NonFiniteGradientError(f"loss is not finite ({float(loss.detach())})")
    grads = torch.autograd.grad(loss, leaves, allow_unused=True)
    out = {}
    bad = []
    for n, p, g in zip(names, leaves, grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        if not bool(torch.isfinite(g).all()):
            bad.append(n)
        out[n] = g
    if bad:
        raise NonFiniteGradientError(f"non-finite gradient for: {', '.join(bad)}")
    return out


# ------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    m: object
    v: object
    t: int = 0


def adam_step(param, grad, state: AdamState | None, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Works for numpy arrays and torch tensors."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if state is None:
        zeros = grad * 0
        state = AdamState(zeros, zeros, 0)
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad * grad
    mhat = m / (1 - beta1**t)
    vhat = v / (1 - beta2**t)
    sqrt = torch.sqrt if isinstance(vhat, torch.Tensor) else np.sqrt
    return param - lr * mhat / (sqrt(vhat) + eps), AdamState(m, v, t)


@dataclass
class Adam:
    """Per-parameter Adam with a learning rate per named group.

    ``group_of`` maps a parameter name to its group; by default a name's group
    is the part before the first ``/``.
    """

    lrs: dict
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    scale: float = 1.0
    state: dict = field(default_factory=dict)

    @staticmethod
    def group_of(name: str) -> str:
        return name.split("/", 1)[0]

    def lr(self, name: str) -> float:
        return self.lrs[self.group_of(name)] * self.scale

    @torch.no_grad()
    def step(self, params: dict, grads: dict) -> None:
        """Update ``params`` in place; entries whose grad is None are left untouched."""
        for name, g in grads.items():
            if g is None:
                continue
            p = params[name]
            new, self.state[name] = adam_step(p.detach(), g, self.state.get(name), self.lr(name), self.beta1, self.beta2, self.eps)
            p.copy_(new)


# ---------------------------------------------------------- finite differences


@dataclass
class FDReport:
    max_rel_error: dict  # group -> worst relative error over its samples
    samples: list  # (name, flat index, analytic, numeric, rel error)
    tolerance: float = math.inf

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    def format(self) -> str:
        lines = [f"{g:<24s} max rel err {e:.3e}" for g, e in sorted(self.max_rel_error.items())]
        return "\n".join(lines)


def relative_error(a: float, b: float, floor: float) -> float:
    scale = max(abs(a), abs(b))
    if scale < floor:
        return 0.0
    return abs(a - b) / scale


def fd_check(
    loss_fn,
    params: dict,
    h=1e-3,
    sample_count: int = 8,
    seed: int = 0,
    guard=None,
    floor: float = 1e-9,
    tolerance: float = math.inf,
) -> FDReport:
    """Compare analytic gradients with central differences on sampled coordinates.

    ``h`` is a float or a dict ``group -> step``. ``sample_count`` coordinates
    are drawn per parameter with a seeded generator. With ``guard`` the loss is
    called as ``loss_fn(params, keep)`` where ``keep = guard(base, minus, plus)``
    marks the pixels whose discrete state (visible face, silhouette edges) is
    unchanged by the perturbation; excluded pixels drop out of both estimates.
    """
    rng = np.random.default_rng(seed)
    base = {n: p.detach().clone().contiguous() for n, p in params.items()}
    call = (lambda p, keep: loss_fn(p)) if guard is None else loss_fn
    shared = None if guard is not None else gradient(lambda p: call(p, None), base)
    worst: dict = {}
    samples = []
    for name in base:
        group = Adam.group_of(name)
        step = h[group] if isinstance(h, dict) else h
        n = base[name].numel()
        picks = rng.choice(n, size=min(sample_count, n), replace=False)
        for flat in picks:
            flat = int(flat)

            def shifted(delta):
                p = dict(base)
                q = base[name].clone().contiguous()
                q.reshape(-1)[flat] += delta
                p[name] = q
                return p

            minus, plus = shifted(-step), shifted(step)
            keep = guard(base, minus, plus) if guard is not None else None
            if shared is None:
                g = gradient(lambda p: call(p, keep), base)[name]
            else:
                g = shared[name]
            analytic = float(g.reshape(-1)[flat])
            with torch.no_grad():
                numeric = float(call(plus, keep) - call(minus, keep)) / (2 * step)
            err = relative_error(analytic, numeric, floor)
            samples.append((name, flat, analytic, numeric, err))
            worst[group] = max(worst.get(group, 0.0), err)
    return FDReport(worst, samples, tolerance)
