"""Parameter registry and the layer building blocks shared by both denoisers."""

from __future__ import annotations

import math
from typing import Dict, Optional

import numpy as np

from .tensor import Tensor, UsageError


class ParamStore:
    """Named trainable tensors. Names are stable and ordered by creation,
    which fixes both checkpoint record order and init-stream consumption."""

    def __init__(self) -> None:
        self.tensors: Dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray, requires_grad: bool = True) -> Tensor:
        if name in self.tensors:
            raise UsageError(f"duplicate parameter name {name!r}")
        t = Tensor(np.ascontiguousarray(array), requires_grad=requires_grad)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list:
        return list(self.tensors)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.tensors) - set(state)
        extra = set(state) - set(self.tensors)
        if missing or extra:
            raise UsageError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, t in self.tensors.items():
            arr = np.ascontiguousarray(state[k], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise UsageError(f"shape mismatch for {k}: {arr.shape} vs {t.data.shape}")
            t.data = arr

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag

    def num_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def _he(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Linear:
    def __init__(self, ps: ParamStore, name: str, din: int, dout: int,
                 rng: Optional[np.random.Generator], init: str = "he",
                 bias: bool = True, dtype=np.float32):
        if init == "zero":
            w = np.zeros((din, dout), dtype=dtype)
        elif init == "small":
            w = (rng.standard_normal((din, dout)) * 0.01).astype(dtype)
        else:
            w = _he(rng, (din, dout), din, dtype)
        self.w = ps.add(f"{name}.w", w)
        self.b = ps.add(f"{name}.b", np.zeros(dout, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.w
        if self.b is not None:
            y = y + self.b
        return y


class Conv:
    def __init__(self, ps: ParamStore, name: str, cin: int, cout: int, k: int,
                 rng: Optional[np.random.Generator], stride: int = 1, pad: int = 0,
                 init: str = "he", dtype=np.float32):
        if init == "zero":
            w = np.zeros((cout, cin, k, k), dtype=dtype)
        else:
            w = _he(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.w = ps.add(f"{name}.w", w)
        self.b = ps.add(f"{name}.b", np.zeros(cout, dtype=dtype))
        self.stride = stride
        self.pad = pad
        self.cout = cout

    def __call__(self, x: Tensor) -> Tensor:
        y = x.conv2d(self.w, self.stride, self.pad)
        return y + self.b.reshape(1, self.cout, 1, 1)


def avgpool2x(x: Tensor) -> Tensor:
    """2x2 average pooling of (B,C,H,W) via reshape + mean."""
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(dims=(3, 5))


def norm_groups(c: int) -> int:
    for g in (8, 4, 2, 1):
        if c % g == 0:
            return g
    return 1


class GroupNormAffine:
    def __init__(self, ps: ParamStore, name: str, c: int, dtype=np.float32):
        self.groups = norm_groups(c)
        self.c = c
        self.weight = ps.add(f"{name}.weight", np.ones(c, dtype=dtype))
        self.bias = ps.add(f"{name}.bias", np.zeros(c, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        y = x.group_norm(self.groups)
        return y * self.weight.reshape(1, self.c, 1, 1) + self.bias.reshape(1, self.c, 1, 1)


def sinusoidal_embedding(t: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """Classic transformer position features for (possibly fractional) timesteps."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1).astype(dtype)


def one_hot(ids: np.ndarray, n: int, dtype=np.float32) -> np.ndarray:
    ids = np.asarray(ids).reshape(-1)
    if np.any(ids < 0) or np.any(ids >= n):
        raise UsageError(f"class id outside [0, {n})")
    out = np.zeros((ids.size, n), dtype=dtype)
    out[np.arange(ids.size), ids] = 1.0
    return out


class TimeClassEmbed:
    """Sinusoidal timestep features -> MLP, plus a learned class table."""

    def __init__(self, ps: ParamStore, name: str, dim: int, num_classes: int,
                 rng: np.random.Generator, time_scale: float = 1.0, dtype=np.float32):
        self.dim = dim
        self.num_classes = num_classes
        self.time_scale = time_scale
        self.dtype = dtype
        self.lin1 = Linear(ps, f"{name}.mlp1", dim, dim, rng, dtype=dtype)
        self.lin2 = Linear(ps, f"{name}.mlp2", dim, dim, rng, dtype=dtype)
        self.table = ps.add(f"{name}.class_table", (rng.standard_normal((num_classes, dim)) * 0.02).astype(dtype))

    def __call__(self, t: np.ndarray, class_id: np.ndarray) -> Tensor:
        feats = Tensor(sinusoidal_embedding(np.asarray(t) * self.time_scale, self.dim, self.dtype))
        emb = self.lin2(self.lin1(feats).silu())
        cls = Tensor(one_hot(class_id, self.num_classes, self.dtype)) @ self.table
        return emb + cls


class ResBlock:
    """GroupNorm/SiLU/conv twice, timestep vector added between convs."""

    def __init__(self, ps: ParamStore, name: str, c: int, emb_dim: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.c = c
        self.gn1 = GroupNormAffine(ps, f"{name}.gn1", c, dtype)
        self.conv1 = Conv(ps, f"{name}.conv1", c, c, 3, rng, pad=1, dtype=dtype)
        self.tproj = Linear(ps, f"{name}.tproj", emb_dim, c, rng, dtype=dtype)
        self.gn2 = GroupNormAffine(ps, f"{name}.gn2", c, dtype)
        self.conv2 = Conv(ps, f"{name}.conv2", c, c, 3, rng, pad=1, dtype=dtype)

    def __call__(self, h: Tensor, emb: Tensor) -> Tensor:
        y = self.conv1(self.gn1(h).silu())
        tv = self.tproj(emb.silu())
        y = y + tv.reshape(tv.shape[0], self.c, 1, 1)
        y = self.conv2(self.gn2(y).silu())
        return h + y


class TransformerBlock:
    """Pre-norm attention + MLP with zero-initialized shift/scale/gate
    modulation from the conditioning vector."""

    MLP_RATIO = 4

    def __init__(self, ps: ParamStore, name: str, c: int, heads: int, emb_dim: int,
                 rng: np.random.Generator, dtype=np.float32):
        if c % heads:
            raise UsageError(f"width {c} not divisible by heads {heads}")
        self.c = c
        self.heads = heads
        self.dh = c // heads
        self.wq = Linear(ps, f"{name}.wq", c, c, rng, dtype=dtype)
        self.wk = Linear(ps, f"{name}.wk", c, c, rng, dtype=dtype)
        self.wv = Linear(ps, f"{name}.wv", c, c, rng, dtype=dtype)
        self.wo = Linear(ps, f"{name}.wo", c, c, rng, dtype=dtype)
        hidden = self.MLP_RATIO * c
        self.mlp1 = Linear(ps, f"{name}.mlp1", c, hidden, rng, dtype=dtype)
        self.mlp2 = Linear(ps, f"{name}.mlp2", hidden, c, rng, dtype=dtype)
        self.mods = [Linear(ps, f"{name}.mod.{part}", emb_dim, c, rng, init="zero", dtype=dtype)
                     for part in ("shift1", "scale1", "gate1", "shift2", "scale2", "gate2")]

    def _attend(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        def split(t: Tensor) -> Tensor:
            return t.reshape(b, n, self.heads, self.dh).transpose(0, 2, 1, 3)
        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = (q @ k.transpose(0, 1, 3, 2)).scale(1.0 / math.sqrt(self.dh))
        mix = scores.softmax() @ v
        return self.wo(mix.transpose(0, 2, 1, 3).reshape(b, n, c))

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        b = x.shape[0]
        e = emb.silu()
        sh1, sc1, g1, sh2, sc2, g2 = (m(e).reshape(b, 1, self.c) for m in self.mods)
        h = x.layer_norm() * (sc1 + 1.0) + sh1
        x = x + self._attend(h) * g1
        h = x.layer_norm() * (sc2 + 1.0) + sh2
        h = self.mlp2(self.mlp1(h).silu())
        return x + h * g2
