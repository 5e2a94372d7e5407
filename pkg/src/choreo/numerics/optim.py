from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import NumericalAbort, Tensor


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.eps <= 0:
            raise ValueError("epsilon must be positive")


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    config: AdamConfig,
    step: int,
    lr: float | None = None,
) -> None:
    """One bias-corrected Adam update, in place on ``param``, ``m`` and ``v``."""
    if step < 1:
        raise ValueError("Adam step counter starts at 1")
    lr = config.lr if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)
    param -= (lr * m_hat / (np.sqrt(v_hat) + config.eps)).astype(param.dtype, copy=False)


class Adam:
    """Adam over a named parameter dict.

    Only the parameters handed in are ever touched, which is how frozen
    sub-networks are kept bit-identical.
    """

    def __init__(self, params: dict[str, Tensor], config: AdamConfig):
        self.params = dict(params)
        self.config = config
        self.lr = config.lr
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                bad = int(np.size(p.grad) - np.isfinite(p.grad).sum())
                raise NumericalAbort(
                    f"non-finite gradient in {name} ({bad} entries)",
                    {"parameter": name, "step": self.step_count + 1, "non_finite": bad},
                )
        self.step_count += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, self.m[name], self.v[name], self.config, self.step_count, self.lr)

    def state_dict(self) -> dict:
        return {
            "step": self.step_count,
            "lr": self.lr,
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step"])
        self.lr = float(state["lr"])
        for k in self.params:
            self.m[k] = np.array(state["m"][k], dtype=self.params[k].dtype)
            self.v[k] = np.array(state["v"][k], dtype=self.params[k].dtype)
