"""Linear layers, the MLP feature extractor, SGD, and checkpoint I/O."""
from __future__ import annotations

import os
from typing import Iterable

import numpy as np

from .autodiff import DimensionError, Tensor, add, matmul, relu, transpose


class LinearLayer:
    """Fully-connected layer computing ``x @ W.T (+ b)``.

    ``init="kaiming"`` draws weights (and bias) from U(-1/sqrt(fan_in),
    1/sqrt(fan_in)). ``init="identity"`` requires a square layer and starts
    from I + N(0, noise_std^2).
    """

    def __init__(
        self,
        in_features: int,
        out_features: int,
        use_bias: bool = True,
        rng: np.random.Generator | None = None,
        init: str = "kaiming",
        noise_std: float = 0.01,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.use_bias = use_bias
        bound = 1.0 / np.sqrt(in_features)
        if init == "kaiming":
            w = rng.uniform(-bound, bound, size=(out_features, in_features))
        elif init == "identity":
            if in_features != out_features:
                raise DimensionError(
                    f"identity init needs a square layer, got {out_features}x{in_features}"
                )
            w = np.eye(in_features) + rng.normal(0.0, noise_std, size=(in_features, in_features))
        elif init == "zeros":
            w = np.zeros((out_features, in_features))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Tensor(w, requires_grad=True)
        self.bias = None
        if use_bias:
            self.bias = Tensor(rng.uniform(-bound, bound, size=(1, out_features)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.weight": self.weight}
        if self.bias is not None:
            out[f"{prefix}.bias"] = self.bias
        return out


def linear_forward(layer: LinearLayer, x: Tensor) -> Tensor:
    if x.shape[1] != layer.in_features:
        raise DimensionError(
            f"linear: input has {x.shape[1]} columns, layer expects {layer.in_features}"
        )
    out = matmul(x, transpose(layer.weight))
    if layer.bias is not None:
        out = add(out, layer.bias)
    return out


class MlpBackbone:
    """Stack of linear layers with ReLU between them; the last layer is linear."""

    def __init__(
        self,
        d_in: int,
        hidden: int,
        depth: int = 2,
        rng: np.random.Generator | None = None,
        use_bias: bool = True,
    ):
        if depth < 1:
            raise ValueError(f"depth must be >= 1, got {depth}")
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = [d_in] + [hidden] * depth
        self.layers = [
            LinearLayer(widths[i], widths[i + 1], use_bias=use_bias, rng=rng) for i in range(depth)
        ]
        self.out_features = hidden

    def __call__(self, x: Tensor) -> Tensor:
        return backbone_forward(self, x)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}.{i}"))
        return out


def backbone_forward(net: MlpBackbone, x: Tensor) -> Tensor:
    h = x
    for i, layer in enumerate(net.layers):
        h = layer(h)
        if i < len(net.layers) - 1:
            h = relu(h)
    return h


class SgdOptimizer:
    """SGD with heavy-ball momentum and L2 weight decay.

    Update per parameter: ``v <- momentum * v + (g + weight_decay * w)`` then
    ``w <- w - lr * v``. Gradients are cleared after every step.
    """

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 0.01,
        momentum: float = 0.9,
        weight_decay: float = 0.001,
    ):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise RuntimeError(f"parameter {i} with shape {p.shape} has no gradient")
        for p, v in zip(self.params, self.velocity):
            d = p.grad
            if self.weight_decay:
                d = d + self.weight_decay * p.data
            if self.momentum:
                v *= self.momentum
                v += d
                d = v
            p.data -= self.lr * d
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(opt: SgdOptimizer, params: Iterable[Tensor] | None = None) -> None:
    if params is not None and [id(p) for p in params] != [id(p) for p in opt.params]:
        raise ValueError("params do not match the optimizer's parameter list")
    opt.step()


def save_checkpoint(path: str | os.PathLike, params: dict[str, Tensor]) -> None:
    """Write a name -> matrix map as an uncompressed ``.npz`` archive."""
    with open(path, "wb") as fh:
        np.savez(fh, **{name: t.data for name, t in params.items()})


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as archive:
        return {name: archive[name].copy() for name in archive.files}
