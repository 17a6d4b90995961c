from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


class Adam:
    """Bias-corrected Adam over a fixed list of leaf tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
        self.state.m = [np.zeros_like(p.data) for p in self.params]
        self.state.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        st = self.state
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"adam step: parameter {p} has no gradient buffer")
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for p, m, v in zip(self.params, st.m, st.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / c1
            vhat = v / c2
            p.data -= (st.lr * mhat / (np.sqrt(vhat) + st.eps)).astype(p.dtype)
            g.fill(0)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def reset_rows(self, param: Tensor, rows) -> None:
        """Forget the moment history of selected rows of one parameter."""
        for i, p in enumerate(self.params):
            if p is param:
                self.state.m[i][rows] = 0
                self.state.v[i][rows] = 0
                return
        raise KeyError("parameter is not managed by this optimizer")
