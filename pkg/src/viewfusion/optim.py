"""First-order optimizers over named parameter dicts."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DiffTensor

KINDS = ("sgd-momentum", "adam")


@dataclass
class OptimizerConfig:
    kind: str = "sgd-momentum"
    learning_rate: float = 1e-2
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    # learning rate is multiplied by decay_factor when step_count crosses each milestone
    decay_milestones: list[int] = field(default_factory=list)
    decay_factor: float = 0.1

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer kind '{self.kind}', expected one of {KINDS}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")


class Optimizer:
    """SGD with momentum or Adam; per-parameter state buffers keyed by name."""

    def __init__(self, cfg: OptimizerConfig):
        cfg.validate()
        self.cfg = cfg
        self.step_count = 0
        self._state: dict[str, dict[str, np.ndarray]] = {}

    @property
    def learning_rate(self) -> float:
        lr = self.cfg.learning_rate
        for m in self.cfg.decay_milestones:
            if self.step_count >= m:
                lr *= self.cfg.decay_factor
        return lr

    def zero_grad(self, params: dict[str, DiffTensor]) -> None:
        for p in params.values():
            p.zero_grad()

    def step(self, params: dict[str, DiffTensor]) -> None:
        self.step_count += 1
        lr = self.learning_rate
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.values.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter "
                                 f"'{name}' shape {p.values.shape}")
            st = self._state.setdefault(name, {})
            if self.cfg.kind == "sgd-momentum":
                v = st.setdefault("velocity", np.zeros_like(p.values))
                v *= self.cfg.momentum
                v += g
                p.values -= lr * v
            else:  # adam
                m = st.setdefault("m", np.zeros_like(p.values))
                v = st.setdefault("v", np.zeros_like(p.values))
                t = st["t"] = st.get("t", 0) + 1
                m *= self.cfg.beta1
                m += (1 - self.cfg.beta1) * g
                v *= self.cfg.beta2
                v += (1 - self.cfg.beta2) * g * g
                mhat = m / (1 - self.cfg.beta1 ** t)
                vhat = v / (1 - self.cfg.beta2 ** t)
                p.values -= lr * mhat / (np.sqrt(vhat) + self.cfg.epsilon)
