"""Layers and the Sequential container."""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from ..errors import ShapeError
from . import autograd as ag
from .autograd import Parameter, Tape, Tensor, check_finite


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    name = "layer"

    def parameters(self) -> list[Parameter]:
        return []

    def check_input(self, x: Tensor) -> None:
        pass

    def __call__(self, x: Tensor) -> Tensor:
        self.check_input(x)
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None, name: str = "dense"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.n_in, self.n_out = n_in, n_out
        self.weight = Parameter(kaiming_uniform(rng, (n_in, n_out), n_in), name=f"{name}.weight")
        self.bias = Parameter(np.zeros(n_out), name=f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def check_input(self, x):
        if x.data.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"{self.name}: expected (N, {self.n_in}), got {x.shape}")

    def forward(self, x):
        return ag.add(ag.matmul(x, self.weight), self.bias)

    def output_shape(self, shape):
        return (shape[0], self.n_out)


class Conv2d(Layer):
    def __init__(self, c_in: int, c_out: int, k: int = 3, rng: np.random.Generator | None = None,
                 name: str = "conv"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.c_in, self.c_out, self.k = c_in, c_out, k
        fan_in = c_in * k * k
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in, k, k), fan_in), name=f"{name}.weight")
        self.bias = Parameter(np.zeros(c_out), name=f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def check_input(self, x):
        if x.data.ndim != 4 or x.shape[1] != self.c_in or min(x.shape[2:]) < self.k:
            raise ShapeError(
                f"{self.name}: expected (N, {self.c_in}, H>={self.k}, W>={self.k}), got {x.shape}"
            )

    def forward(self, x):
        return ag.conv2d(x, self.weight, self.bias)

    def output_shape(self, shape):
        n, _, h, w = shape
        return (n, self.c_out, h - self.k + 1, w - self.k + 1)


class ReLU(Layer):
    name = "relu"

    def forward(self, x):
        return ag.relu(x)


class MaxPool2(Layer):
    name = "maxpool2"

    def check_input(self, x):
        if x.data.ndim != 4 or min(x.shape[2:]) < 2:
            raise ShapeError(f"{self.name}: expected (N, C, H>=2, W>=2), got {x.shape}")

    def forward(self, x):
        return ag.maxpool2(x)

    def output_shape(self, shape):
        n, c, h, w = shape
        return (n, c, h // 2, w // 2)


class Flatten(Layer):
    name = "flatten"

    def forward(self, x):
        return ag.reshape(x, (x.shape[0], -1))

    def output_shape(self, shape):
        return (shape[0], int(np.prod(shape[1:])))


class Softmax(Layer):
    name = "softmax"

    def check_input(self, x):
        if x.data.ndim != 2:
            raise ShapeError(f"{self.name}: expected (N, C), got {x.shape}")

    def forward(self, x):
        return ag.softmax(x)


class Sequential(Layer):
    name = "sequential"

    def __init__(self, layers: Sequence[Layer], input_shape: tuple[int, ...] | None = None):
        self.layers = list(layers)
        self.input_shape = input_shape  # per-example shape, batch dim excluded

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        return [(f"{i}.{p.name}", p) for i, layer in enumerate(self.layers) for p in layer.parameters()]

    def check_input(self, x):
        if self.input_shape is not None and tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(
                f"{self.name}: expected per-example shape {tuple(self.input_shape)}, got {tuple(x.shape[1:])}"
            )

    def forward(self, x, capture: Iterable[int] = ()):
        capture = set(capture)
        taps = []
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i in capture:
                taps.append(x)
        return (x, taps) if capture else x

    def __call__(self, x, capture: Iterable[int] = ()):
        self.check_input(x)
        return self.forward(x, capture)

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag


def forward(network: Layer, batch) -> tuple[Tensor, Tape]:
    """Run ``network`` on ``batch`` while recording a tape for :func:`backward`."""
    batch = ag.as_tensor(batch)
    with Tape() as tape:
        out = network(batch)
    return check_finite(out, network.name), tape


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()
