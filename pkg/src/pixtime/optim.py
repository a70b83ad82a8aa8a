"""Adam optimizer and the finite-difference gradient checker."""

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .autodiff import Parameter, backward, no_grad
from .errors import ConfigError, DeterminismError


@dataclass
class AdamState:
    """Moment estimates per parameter name plus the shared step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def _as_param_dict(params) -> dict:
    if isinstance(params, Mapping):
        return dict(params)
    return {p.name: p for p in params}


class Adam:
    """Standard Adam with bias correction, updating parameters in place."""

    def __init__(self, params, lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = _as_param_dict(params)
        self.lr = lr
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        s = self.state
        s.t += 1
        bc1 = 1.0 - s.beta1 ** s.t
        bc2 = 1.0 - s.beta2 ** s.t
        for name, p in self.params.items():
            g = p.grad
            s.m[name] = s.beta1 * s.m[name] + (1.0 - s.beta1) * g
            s.v[name] = s.beta2 * s.v[name] + (1.0 - s.beta2) * (g * g)
            m_hat = s.m[name] / bc1
            v_hat = s.v[name] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + s.eps)

    def reset_state(self) -> None:
        self.state.t = 0
        for name in self.params:
            self.state.m[name][...] = 0.0
            self.state.v[name][...] = 0.0


def adam_step(params, state: AdamState, lr: float) -> None:
    """Functional single Adam step over a parameter set (state mutated)."""
    params = _as_param_dict(params)
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        g = p.grad
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        p.data -= lr * (state.m[name] / bc1) / (np.sqrt(state.v[name] / bc2) + state.eps)


@dataclass
class GradCheckReport:
    """Worst-case relative error between tape and finite-difference grads."""

    max_rel_error: float
    worst_param: str
    per_param: dict

    def __str__(self):
        return (
            f"grad check: max relative error {self.max_rel_error:.3e} "
            f"(parameter {self.worst_param})"
        )


def grad_check(
    f: Callable[[], object],
    params: Iterable[Parameter] | Mapping[str, Parameter],
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare tape gradients of a scalar function against central differences.

    `f` must be deterministic and close over `params`; it is evaluated
    twice up front and a bitwise mismatch raises DeterminismError. The
    relative error per coordinate is |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
    """
    if not (0.0 < h <= 1e-3):
        raise ConfigError(f"grad_check step h must lie in (0, 1e-3], got {h}")
    params = _as_param_dict(params)

    first = f().item()
    second = f().item()
    if first != second:
        raise DeterminismError(
            f"function returned {first!r} then {second!r} on identical inputs"
        )

    for p in params.values():
        p.zero_grad()
    loss = f()
    if loss.requires_grad:
        backward(loss)
    analytic = {name: p.grad.copy() for name, p in params.items()}

    per_param = {}
    max_err, worst = 0.0, ""
    for name, p in params.items():
        flat = p.data.reshape(-1)
        fd = np.zeros_like(flat)
        with no_grad():
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + h
                up = f().item()
                flat[i] = original - h
                down = f().item()
                flat[i] = original
                fd[i] = (up - down) / (2.0 * h)
        g_ad = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(fd)), 1e-8)
        rel = np.abs(g_ad - fd) / denom
        err = float(rel.max()) if rel.size else 0.0
        per_param[name] = err
        if err >= max_err:
            max_err, worst = err, name
    return GradCheckReport(max_rel_error=max_err, worst_param=worst, per_param=per_param)
