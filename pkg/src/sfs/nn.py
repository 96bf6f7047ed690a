"""Parameter containers and layer helpers on top of the tensor engine."""

from __future__ import annotations

import hashlib

import numpy as np

from . import tensor as T
from .tensor import Activation, LayerConfig, Tensor


def substream(seed: int, *names: str) -> np.random.Generator:
    """Named deterministic RNG substream derived from a single root seed."""
    h = hashlib.blake2b("/".join(names).encode(), digest_size=8).digest()
    return np.random.default_rng(np.random.SeedSequence([int(seed), int.from_bytes(h, "little")]))


class Module:
    """Tiny parameter registry; submodules are discovered via attributes."""

    def parameters(self, prefix="") -> dict[str, Tensor]:
        out = {}

        def walk(key, val):
            if isinstance(val, Tensor) and val.requires_grad:
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.parameters(key))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    walk(f"{key}.{i}", item)

        for name, val in vars(self).items():
            walk(f"{prefix}.{name}" if prefix else name, val)
        return out

    def buffers(self, prefix="") -> dict[str, np.ndarray]:
        out = {}

        def walk(key, val):
            if isinstance(val, dict) and set(val) == {"mean", "var"}:
                out[f"{key}.mean"] = val["mean"]
                out[f"{key}.var"] = val["var"]
            elif isinstance(val, Module):
                out.update(val.buffers(key))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    walk(f"{key}.{i}", item)

        for name, val in vars(self).items():
            walk(f"{prefix}.{name}" if prefix else name, val)
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        return {k: p.grad for k, p in self.parameters().items() if p.grad is not None}

    def load_state(self, tensors: dict[str, np.ndarray]):
        params = self.parameters()
        bufs = self.buffers()
        for name, arr in tensors.items():
            if name in params:
                if params[name].data.shape != arr.shape:
                    raise T.DimensionError(f"shape mismatch loading '{name}'")
                params[name].data = arr.copy()
            elif name in bufs:
                bufs[name][...] = arr
            else:
                raise KeyError(f"unknown tensor '{name}' in checkpoint")

    def state(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.parameters().items()}
        out.update(self.buffers())
        return out


class Conv(Module):
    """Conv + optional batch norm + activation (norm before activation)."""

    def __init__(self, rng, in_ch, out_ch, k=3, stride=1, dilation=1, padding=None,
                 activation=Activation.LEAKY_RELU, batch_norm=False, leaky_slope=0.01):
        if padding is None:
            # 'same' padding for stride-1 layers so skip concatenations align
            padding = dilation * (k - 1) // 2
        self.cfg = LayerConfig(kernel_h=k, kernel_w=k, stride=stride, dilation=dilation,
                               in_channels=in_ch, out_channels=out_ch, padding=padding,
                               activation=activation, leaky_slope=leaky_slope,
                               batch_norm=batch_norm)
        self.weight = T.kaiming_conv(rng, out_ch, in_ch, k, k)
        self.use_bn = batch_norm
        if batch_norm:
            self.bn_gamma = T.ones(out_ch, requires_grad=True)
            self.bn_beta = T.zeros(out_ch, requires_grad=True)
            self.bn_running = {"mean": np.zeros(out_ch), "var": np.ones(out_ch)}
        else:
            self.bias = T.zeros(out_ch, requires_grad=True)

    def __call__(self, x: Tensor, training=False) -> Tensor:
        y = T.conv2d(x, self.weight, self.cfg)
        if self.use_bn:
            y = T.batch_norm(y, self.bn_gamma, self.bn_beta, self.bn_running, training)
        else:
            bshape = (-1, 1, 1) if y.ndim == 3 else (1, -1, 1, 1)
            y = y + T.reshape(self.bias, bshape)
        return T.activation_apply(y, self.cfg)


class Dense(Module):
    def __init__(self, rng, n_in, n_out, activation=Activation.LEAKY_RELU):
        self.weight = T.kaiming_dense(rng, n_in, n_out)
        self.bias = T.zeros(n_out, requires_grad=True)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight) + self.bias
        if self.activation is Activation.LEAKY_RELU:
            y = T.leaky_relu(y)
        return y


def weight_decay_penalty(params: dict[str, Tensor], kappa: float) -> Tensor:
    """kappa * ||theta||_2^2 over all trainable weights."""
    total = T.Tensor(0.0)
    if kappa == 0.0:
        return total
    for p in params.values():
        total = total + T.tsum(p * p)
    return total * kappa
