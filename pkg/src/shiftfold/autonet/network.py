from __future__ import annotations

import numpy as np

from .layers import Layer


class Sequential:
    """Ordered layer stack.  Parameter names are ``"<index>.<name>"``."""

    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)

    def forward(self, x, train=True, rng=None):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, train=train, rng=rng)
            caches.append(cache)
        return x, caches

    def backward(self, caches, grad_out):
        grads = {}
        for idx in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[idx]
            grad_out, layer_grads = layer.backward(caches[idx], grad_out)
            for name, g in layer_grads.items():
                grads[f"{idx}.{name}"] = g
        return grad_out, grads

    def __call__(self, x, train=False, rng=None):
        return self.forward(x, train=train, rng=rng)[0]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for idx, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                out[f"{idx}.{name}"] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for idx, layer in enumerate(self.layers):
            for name, b in layer.buffers.items():
                out[f"{idx}.{name}"] = b
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters then buffers, layer by layer, in declaration order."""
        state = {}
        for idx, layer in enumerate(self.layers):
            for store in (layer.params, layer.buffers):
                for name, value in store.items():
                    state[f"{idx}.{name}"] = value
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for idx, layer in enumerate(self.layers):
            for store in (layer.params, layer.buffers):
                for name in store:
                    key = f"{idx}.{name}"
                    if key not in state:
                        raise KeyError(f"missing entry {key!r}")
                    value = np.asarray(state[key], dtype=np.float64)
                    if value.shape != store[name].shape:
                        raise ValueError(f"{key}: shape {value.shape} != {store[name].shape}")
                    store[name][...] = value

    def output_shape(self, in_shape):
        shape = tuple(in_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def n_params(self) -> int:
        return sum(p.size for p in self.params().values())

    def __repr__(self):
        inner = ",\n  ".join(repr(layer) for layer in self.layers)
        return f"Sequential(\n  {inner}\n)"

