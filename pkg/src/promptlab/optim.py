"""AdamW with per-group learning rate and decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_grad_norm: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("eps must be positive and weight_decay non-negative")


@dataclass
class ParamGroup:
    tensors: list[Tensor]
    lr: float
    weight_decay: float = 0.0


@dataclass
class OptimizerState:
    step: int = 0
    exp_avg: list[list[np.ndarray]] = field(default_factory=list)
    exp_avg_sq: list[list[np.ndarray]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "exp_avg": [[m.tolist() for m in g] for g in self.exp_avg],
            "exp_avg_sq": [[v.tolist() for v in g] for g in self.exp_avg_sq],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerState":
        return cls(
            step=int(d["step"]),
            exp_avg=[[np.asarray(m, dtype=np.float64) for m in g] for g in d["exp_avg"]],
            exp_avg_sq=[[np.asarray(v, dtype=np.float64) for v in g] for g in d["exp_avg_sq"]],
        )


def adamw_step(groups: Sequence[ParamGroup], state: OptimizerState,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               max_grad_norm: float | None = None) -> None:
    """One decoupled AdamW update, in place.

    ``theta <- theta * (1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)``.
    The decay factor is skipped entirely for ``wd == 0`` so such tensors see a
    plain Adam update.  A missing gradient counts as zero.
    """
    if not state.exp_avg:
        state.exp_avg = [[np.zeros_like(t.data) for t in g.tensors] for g in groups]
        state.exp_avg_sq = [[np.zeros_like(t.data) for t in g.tensors] for g in groups]

    grads = []
    for g in groups:
        row = []
        for t in g.tensors:
            grad = t.grad if t.grad is not None else np.zeros_like(t.data)
            if not np.all(np.isfinite(grad)):
                bad = int(np.size(grad) - np.count_nonzero(np.isfinite(grad)))
                raise FloatingPointError(
                    f"non-finite gradient in tensor {t.name or '<unnamed>'} "
                    f"shape={t.shape}: {bad} bad entries")
            row.append(grad)
        grads.append(row)

    if max_grad_norm is not None:
        total = np.sqrt(sum(float((gr * gr).sum()) for row in grads for gr in row))
        if total > max_grad_norm:
            factor = max_grad_norm / (total + 1e-12)
            grads = [[gr * factor for gr in row] for row in grads]

    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for gi, group in enumerate(groups):
        for ti, param in enumerate(group.tensors):
            grad = grads[gi][ti]
            m = state.exp_avg[gi][ti]
            v = state.exp_avg_sq[gi][ti]
            m *= beta1
            m += (1.0 - beta1) * grad
            v *= beta2
            v += (1.0 - beta2) * grad * grad
            if group.weight_decay != 0.0:
                param.data *= 1.0 - group.lr * group.weight_decay
            param.data -= group.lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


class AdamW:
    """Thin stateful wrapper around :func:`adamw_step`."""

    def __init__(self, groups: Sequence[ParamGroup], config: AdamWConfig | None = None):
        self.groups = list(groups)
        self.config = config or AdamWConfig()
        self.state = OptimizerState()

    @property
    def tensors(self) -> list[Tensor]:
        return [t for g in self.groups for t in g.tensors]

    def step(self) -> None:
        c = self.config
        adamw_step(self.groups, self.state, c.beta1, c.beta2, c.eps, c.max_grad_norm)

    def zero_grad(self) -> None:
        zero_grads(self.tensors)
