"""Adam optimizer over the layer-stack parameter dicts."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, modules, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        """``modules``: objects exposing ``param_items()`` (e.g. Sequential)."""
        self.modules = list(modules)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m: dict[int, dict[str, np.ndarray]] = {}
        self._v: dict[int, dict[str, np.ndarray]] = {}
        for mi, mod in enumerate(self.modules):
            self._m[mi] = {name: np.zeros_like(layer.params[key])
                           for name, layer, key in mod.param_items()}
            self._v[mi] = {name: np.zeros_like(layer.params[key])
                           for name, layer, key in mod.param_items()}

    def zero_grads(self):
        for mod in self.modules:
            mod.zero_grads()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for mi, mod in enumerate(self.modules):
            for name, layer, key in mod.param_items():
                g = layer.grads[key]
                m = self._m[mi][name]
                v = self._v[mi][name]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                layer.params[key] -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
