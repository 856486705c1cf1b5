"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import MissingGrad
from .tensor import Parameter


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    def __init__(self, params: list[Parameter], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique within an optimizer")
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for p in self.params:
            self.state.m[p.name] = np.zeros_like(p.data)
            self.state.v[p.name] = np.zeros_like(p.data)

    def step(self) -> None:
        missing = [p.name for p in self.params if p.grad is None]
        if missing:
            raise MissingGrad(f"no gradient for {missing[:5]}{'...' if len(missing) > 5 else ''}")
        st = self.state
        st.step += 1
        c1 = 1.0 - st.beta1 ** st.step
        c2 = 1.0 - st.beta2 ** st.step
        for p in self.params:
            m, v = st.m[p.name], st.v[p.name]
            m *= st.beta1
            m += (1.0 - st.beta1) * p.grad
            v *= st.beta2
            v += (1.0 - st.beta2) * p.grad * p.grad
            p.data = p.data - st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self, prefix: str) -> dict:
        out = {f"{prefix}.step": np.array([float(self.state.step)])}
        for name in self.state.m:
            out[f"{prefix}.m.{name}"] = self.state.m[name]
            out[f"{prefix}.v.{name}"] = self.state.v[name]
        return out

    def load_state_arrays(self, arrays: dict, prefix: str) -> None:
        self.state.step = int(arrays[f"{prefix}.step"][0])
        for name in self.state.m:
            self.state.m[name] = np.array(arrays[f"{prefix}.m.{name}"], dtype=np.float64)
            self.state.v[name] = np.array(arrays[f"{prefix}.v.{name}"], dtype=np.float64)
