"""Desk-scale conditional generator (U-Net-lite) and patch discriminator."""
from __future__ import annotations

import hashlib

import numpy as np

from ..errors import ShapeError
from . import autograd as ag
from .autograd import Tensor

BASE_WIDTH = 16


class Module:
    """Holds an ordered ``name -> Tensor`` parameter store."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _add(self, name: str, shape, rng: np.random.Generator | None, fan_in: int | None = None) -> Tensor:
        if rng is None or fan_in is None:
            data = np.zeros(shape)
        else:
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ShapeError(f"{k}: expected {self.params[k].shape}, got {v.shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


def _conv_block(mod: Module, name: str, cin: int, cout: int, k: int, rng, transposed=False):
    if transposed:
        w = mod._add(f"{name}.weight", (cin, cout, k, k), rng, fan_in=cin * k * k)
    else:
        w = mod._add(f"{name}.weight", (cout, cin, k, k), rng, fan_in=cin * k * k)
    b = mod._add(f"{name}.bias", (cout,), None)
    return w, b


class Generator(Module):
    """Three stride-2 encoder blocks, three transposed-conv decoder blocks with skips.

    ``(N, 1, H, W)`` phase maps -> ``(N, 3, H, W)`` stresses in (-1, 1).
    """

    def __init__(self, rng: np.random.Generator | None = None, width: int = BASE_WIDTH, zero_final: bool = False):
        super().__init__()
        w = width
        _conv_block(self, "enc1", 1, w, 4, rng)
        _conv_block(self, "enc2", w, 2 * w, 4, rng)
        _conv_block(self, "enc3", 2 * w, 4 * w, 4, rng)
        _conv_block(self, "dec3", 4 * w, 2 * w, 4, rng, transposed=True)
        _conv_block(self, "dec2", 4 * w, w, 4, rng, transposed=True)
        _conv_block(self, "dec1", 2 * w, 3, 4, None if zero_final else rng, transposed=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"generator expects (N, 1, H, W), got {x.shape}")
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise ShapeError(f"spatial dims must be divisible by 8, got {x.shape[2:]}")
        p = self.params
        e1 = ag.leaky_relu(ag.conv2d(x, p["enc1.weight"], p["enc1.bias"], 2, 1))
        e2 = ag.leaky_relu(ag.conv2d(e1, p["enc2.weight"], p["enc2.bias"], 2, 1))
        e3 = ag.leaky_relu(ag.conv2d(e2, p["enc3.weight"], p["enc3.bias"], 2, 1))
        d3 = ag.relu(ag.conv_transpose2d(e3, p["dec3.weight"], p["dec3.bias"], 2, 1))
        d2 = ag.relu(ag.conv_transpose2d(ag.concat([d3, e2]), p["dec2.weight"], p["dec2.bias"], 2, 1))
        out = ag.conv_transpose2d(ag.concat([d2, e1]), p["dec1.weight"], p["dec1.bias"], 2, 1)
        return ag.tanh(out)


class Discriminator(Module):
    """PatchGAN-style classifier over the (phase, stress) 4-channel image.

    Emits raw logits of shape ``(N, 1, H/8, W/8)``.
    """

    def __init__(self, rng: np.random.Generator | None = None, width: int = BASE_WIDTH):
        super().__init__()
        w = width
        _conv_block(self, "conv1", 4, w, 4, rng)
        _conv_block(self, "conv2", w, 2 * w, 4, rng)
        _conv_block(self, "conv3", 2 * w, 4 * w, 4, rng)
        _conv_block(self, "head", 4 * w, 1, 3, rng)

    def __call__(self, micro: Tensor, stress: Tensor) -> Tensor:
        p = self.params
        h = ag.concat([micro, stress], axis=1)
        h = ag.leaky_relu(ag.conv2d(h, p["conv1.weight"], p["conv1.bias"], 2, 1))
        h = ag.leaky_relu(ag.conv2d(h, p["conv2.weight"], p["conv2.bias"], 2, 1))
        h = ag.leaky_relu(ag.conv2d(h, p["conv3.weight"], p["conv3.bias"], 2, 1))
        return ag.conv2d(h, p["head.weight"], p["head.bias"], 1, 1)


def seed_all(seed: int, width: int = BASE_WIDTH, zero_final: bool = False):
    """Seeded networks plus the data-order stream for one training session.

    Returns ``(generator, discriminator, data_rng)``; three independent child
    streams are spawned from ``seed`` so changing one consumer never shifts
    another.
    """
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF)
    g_ss, d_ss, data_ss = ss.spawn(3)
    gen = Generator(np.random.default_rng(g_ss), width, zero_final=zero_final)
    disc = Discriminator(np.random.default_rng(d_ss), width)
    return gen, disc, np.random.default_rng(data_ss)


def parameter_hash(*modules: Module) -> str:
    h = hashlib.sha256()
    for m in modules:
        for name, p in m.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()
