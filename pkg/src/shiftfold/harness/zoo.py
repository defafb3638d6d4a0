"""Classifier zoo for 1×28×28 inputs, each in a frequentist and a Bayesian family.

The Bayesian twin swaps every Dense/Conv2d for its local-reparameterization
counterpart and ReLU for Softplus.  ``alexnet-small`` is a shrunken
adaptation to 28×28 inputs and does not follow the original layer sizes.
"""
from __future__ import annotations

from ..autonet import Conv2d, Dense, Flatten, MaxPool2d, ReLU, Sequential, Softplus
from ..bayeslayer import BayesConv2d, BayesDense
from ..numkit import SeededRng

ARCHS = ("mlp-small", "3conv3fc", "lenet", "alexnet-small")
FAMILIES = ("frequentist", "bayes")
NON_FAITHFUL = {"alexnet-small"}

# ("conv", c_out, kernel, padding) | ("pool",) | ("fc", n_out); the final fc layer gets no activation
_LAYOUTS = {
    "mlp-small": [("fc", 64)],
    "3conv3fc": [("conv", 32, 3, 1), ("pool",), ("conv", 64, 3, 1), ("pool",), ("conv", 64, 3, 1), ("pool",),
                 ("fc", 128), ("fc", 64)],
    "lenet": [("conv", 6, 5, 2), ("pool",), ("conv", 16, 5, 0), ("pool",), ("fc", 120), ("fc", 84)],
    "alexnet-small": [("conv", 32, 3, 1), ("pool",), ("conv", 64, 3, 1), ("pool",), ("conv", 96, 3, 1),
                      ("conv", 96, 3, 1), ("conv", 64, 3, 1), ("pool",), ("fc", 256), ("fc", 256)],
}


def parse_model_name(name: str) -> tuple[str, str]:
    """``"lenet:bayes"`` -> ("lenet", "bayes"); a bare arch means frequentist."""
    arch, _, family = name.partition(":")
    family = family or "frequentist"
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHS}")
    if family not in FAMILIES:
        raise ValueError(f"unknown model family {family!r}; choose from {FAMILIES}")
    return arch, family


def model_names() -> list[str]:
    return [f"{a}:{f}" for a in ARCHS for f in FAMILIES]


def build_classifier(name: str, n_classes: int, rng: SeededRng, image_shape=(1, 28, 28)) -> Sequential:
    arch, family = parse_model_name(name)
    bayes = family == "bayes"
    act = Softplus if bayes else ReLU
    layers = []
    shape = tuple(image_shape)
    flat = False
    for i, layer_def in enumerate(_LAYOUTS[arch] + [("fc", n_classes)]):
        last = i == len(_LAYOUTS[arch])
        lrng = rng.child("layer", i)
        if layer_def[0] == "conv":
            _, c_out, k, pad = layer_def
            layer = (BayesConv2d if bayes else Conv2d)(shape[0], c_out, k, lrng, padding=pad)
            layers += [layer, act()]
        elif layer_def[0] == "pool":
            layer = MaxPool2d(2)
            layers.append(layer)
        else:
            if not flat:
                flatten = Flatten()
                layers.append(flatten)
                shape = flatten.output_shape(shape)
                flat = True
            layer = (BayesDense if bayes else Dense)(shape[0], layer_def[1], lrng)
            layers.append(layer)
            if not last:
                layers.append(act())
        shape = layer.output_shape(shape)
    return Sequential(layers)


def is_bayesian(name: str) -> bool:
    return parse_model_name(name)[1] == "bayes"
