"""SGD with momentum, LARS, and the cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import ParamStore


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine annealing without restart, base_lr at step 0 and 0 at the end."""
    if total_steps <= 0 or step >= total_steps:
        return 0.0
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


@dataclass
class OptState:
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def buffer(self, name: str, like: np.ndarray) -> np.ndarray:
        buf = self.momentum.get(name)
        if buf is None:
            buf = self.momentum[name] = np.zeros_like(like)
        elif buf.shape != like.shape:
            raise ValueError(f"momentum buffer for {name} has shape {buf.shape}, param {like.shape}")
        return buf


def _check_shapes(theta: np.ndarray, g: np.ndarray, name: str) -> None:
    if theta.shape != g.shape:
        raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {theta.shape}")


def is_norm_free(name: str, theta: np.ndarray) -> bool:
    """Biases and norm scale/shift: excluded from LARS adaptation and decay."""
    return theta.ndim <= 1


def sgd_momentum_update(theta: np.ndarray, g: np.ndarray, v: np.ndarray,
                        lr: float, mu: float, wd: float) -> None:
    """In place: g' = g + wd*theta; v <- mu*v + g'; theta <- theta - lr*v."""
    dt = theta.dtype.type
    gp = g + dt(wd) * theta if wd else g
    v *= dt(mu)
    v += gp
    theta -= dt(lr) * v


def lars_trust_ratio(theta: np.ndarray, gp: np.ndarray, eps: float = 1e-9) -> float:
    wn = float(np.sqrt((theta.astype(np.float64) ** 2).sum()))
    gn = float(np.sqrt((gp.astype(np.float64) ** 2).sum()))
    if wn > 0 and gn > 0:
        return wn / (gn + eps)
    return 1.0


def lars_update(theta: np.ndarray, g: np.ndarray, v: np.ndarray, lr: float, mu: float,
                wd: float, eps: float = 1e-9, adapt: bool = True) -> float:
    """In place LARS step on one tensor; returns the trust ratio used."""
    dt = theta.dtype.type
    if not adapt:
        wd = 0.0
    gp = g + dt(wd) * theta if wd else g
    r = lars_trust_ratio(theta, gp, eps) if adapt else 1.0
    v *= dt(mu)
    v += gp
    theta -= dt(lr * r) * v
    return r


def sgd_momentum_step(params: ParamStore, state: OptState, lr: float,
                      mu: float = 0.9, wd: float = 0.0) -> None:
    """Update every parameter that received a gradient this step."""
    for name, t in params.items():
        if t.grad is None:
            continue
        _check_shapes(t.data, t.grad, name)
        sgd_momentum_update(t.data, t.grad, state.buffer(name, t.data), lr, mu, wd)
    state.step += 1


def lars_step(params: ParamStore, state: OptState, lr: float, mu: float = 0.9,
              wd: float = 0.0, eps: float = 1e-9) -> dict[str, float]:
    ratios = {}
    for name, t in params.items():
        if t.grad is None:
            continue
        _check_shapes(t.data, t.grad, name)
        ratios[name] = lars_update(t.data, t.grad, state.buffer(name, t.data), lr, mu, wd, eps,
                                   adapt=not is_norm_free(name, t.data))
    state.step += 1
    return ratios
