"""Adam with parameter groups, plus a step-decay learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .tensor import ContractError


def adam_step(params, moments, lr: float, beta1: float, beta2: float, eps: float, step: int):
    """One bias-corrected Adam update applied in place to ``params``.

    ``moments`` is a list of ``(m, v)`` arrays aligned with ``params``; they are
    updated in place. Gradients are read, never modified.
    """
    if step < 1:
        raise ContractError(f"adam step counter must be >= 1, got {step}")
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for p, (m, v) in zip(params, moments):
        if p.grad is None:
            raise ContractError(f"parameter {p.name or p.shape} has no gradient")
        g = p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


class Adam:
    """Adam over named parameter groups, e.g. ``{"visual": [...], "other": [...]}``."""

    def __init__(self, groups: dict, lrs: dict, betas=(0.9, 0.99), eps: float = 1e-8):
        self.groups = {name: list(ps) for name, ps in groups.items()}
        self.lrs = dict(lrs)
        self.base_lrs = dict(lrs)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.moments = {
            name: [(np.zeros(p.shape), np.zeros(p.shape)) for p in ps]
            for name, ps in self.groups.items()
        }

    def zero_grad(self):
        for ps in self.groups.values():
            for p in ps:
                p.grad = None

    def step(self):
        self.step_count += 1
        for name, ps in self.groups.items():
            # parameters a sample never touched (e.g. the prior pathway on a base step) skip the update
            live = [(p, mv) for p, mv in zip(ps, self.moments[name]) if p.grad is not None]
            if live:
                adam_step([p for p, _ in live], [mv for _, mv in live], self.lrs[name],
                          self.beta1, self.beta2, self.eps, self.step_count)

    def state_arrays(self, names: dict) -> dict:
        """Moment arrays keyed ``adam.m.<param>`` / ``adam.v.<param>``.

        ``names`` maps ``id(param)`` to its qualified name.
        """
        out = {}
        for name, ps in self.groups.items():
            for p, (m, v) in zip(ps, self.moments[name]):
                out[f"adam.m.{names[id(p)]}"] = m
                out[f"adam.v.{names[id(p)]}"] = v
        return out

    def load_state_arrays(self, arrays: dict, names: dict, step_count: int):
        for name, ps in self.groups.items():
            for p, (m, v) in zip(ps, self.moments[name]):
                m[...] = arrays[f"adam.m.{names[id(p)]}"]
                v[...] = arrays[f"adam.v.{names[id(p)]}"]
        self.step_count = step_count


class StepLR:
    """Multiply every group's learning rate by ``gamma`` each ``step_size`` epochs."""

    def __init__(self, optimizer: Adam, step_size: int, gamma: float = 0.1):
        if step_size < 1:
            raise ValueError("step_size must be >= 1")
        self.optimizer = optimizer
        self.step_size = step_size
        self.gamma = gamma

    def set_epoch(self, epoch: int):
        factor = self.gamma ** (epoch // self.step_size)
        for name, base in self.optimizer.base_lrs.items():
            self.optimizer.lrs[name] = base * factor

