"""Adam and rectified Adam (RAdam), gradient clipping, class weights."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteError(ArithmeticError):
    """A loss or gradient became NaN or infinite."""


class Optimizer:
    """Adam-family optimizer over a name -> Tensor mapping.

    ``variant="radam"`` applies the variance rectification of Liu et al.: while
    the approximated SMA length rho_t is <= 4 the adaptive term is intractable
    and the update falls back to bias-corrected momentum.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, variant: str = "radam",
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if variant not in ("radam", "adam"):
            raise ValueError(f"unknown optimizer variant {variant!r}")
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        self.params = params
        self.lr = lr
        self.variant = variant
        self.betas = tuple(betas)
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _step_size(self) -> tuple[float, bool]:
        """Multiplier applied to the bias-corrected first moment and whether the
        adaptive denominator is used at the current step."""
        b1, b2 = self.betas
        t = self.t
        bc1 = 1.0 - b1 ** t
        if self.variant == "adam":
            return self.lr / bc1, True
        rho_inf = 2.0 / (1.0 - b2) - 1.0
        rho_t = rho_inf - 2.0 * t * b2 ** t / (1.0 - b2 ** t)
        if rho_t <= 4.0:
            return self.lr / bc1, False
        r = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
        return self.lr * r / bc1, True

    def rectified(self) -> bool:
        """True when the most recent step used the adaptive (rectified) update."""
        return self.t > 0 and self._step_size()[1]

    def step(self, frozen: Iterable[str] = ()) -> None:
        frozen = set(frozen)
        grads = {}
        for name, p in self.params.items():
            if name in frozen:
                continue
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {name}")
            grads[name] = g
        self.t += 1
        b1, b2 = self.betas
        size, adaptive = self._step_size()
        bc2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            p = self.params[name]
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            if adaptive:
                upd = size * m / (np.sqrt(v / bc2) + self.eps)
            else:
                upd = size * m
            p.data = (p.data - upd).astype(p.dtype, copy=False)

    def state_dict(self) -> dict:
        return {"variant": self.variant, "lr": self.lr, "betas": list(self.betas), "eps": self.eps,
                "step": self.t,
                "m": {k: {"shape": list(a.shape), "data": [float(x) for x in a.reshape(-1)]} for k, a in self.m.items()},
                "v": {k: {"shape": list(a.shape), "data": [float(x) for x in a.reshape(-1)]} for k, a in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.variant = state["variant"]
        self.lr = state["lr"]
        self.betas = tuple(state["betas"])
        self.eps = state["eps"]
        self.t = int(state["step"])
        for key in ("m", "v"):
            store = getattr(self, key)
            for name, t in state[key].items():
                store[name] = np.asarray(t["data"], dtype=self.params[name].dtype).reshape(t["shape"])


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
    if not math.isfinite(total):
        raise NonFiniteError("non-finite gradient norm")
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = (p.grad * scale).astype(p.grad.dtype)
    return total


def class_weights(labels: Sequence[int], num_classes: int) -> np.ndarray:
    """Inverse-frequency weights total / (C * count_c); all ones when balanced."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)
    if len(counts) > num_classes:
        raise ValueError(f"labels exceed class count {num_classes}")
    absent = [c for c in range(num_classes) if counts[c] == 0]
    if absent:
        raise ValueError(f"class weighting needs every class present; missing {absent}")
    return counts.sum() / (num_classes * counts.astype(np.float64))
