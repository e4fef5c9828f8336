"""FLOPs accounting for the control branch and the computation-aware losses.

Conventions (shared with the instrumented counter in the tensor engine):
a multiply-accumulate is 2 FLOPs, so conv costs 2*Cout*Cin*k^2*H'*W' and a
linear map costs 2*in*out per row; attention score/mix matmuls follow the
same rule; normalizations and pointwise ops count the tensor size. The
analytic formulas below enumerate the exact primitive sequence each layer
executes, so the table and an instrumented run agree to well under 1%.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Union

import numpy as np

from .backbone import BlockSpec
from .diffusion import ConfigError
from .tensor import Tensor, UsageError


@dataclass
class CostConfig:
    gamma: float = 0.5
    lambda_c: float = 0.5

    def validate(self) -> None:
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.lambda_c < 0.0:
            raise ConfigError(f"lambda_c must be >= 0, got {self.lambda_c}")


@dataclass
class FlopsTable:
    """Per gateable block f_l (block plus its zero module), always-on base
    cost, total router cost, and the all-on total used as the denominator."""

    per_block: List[int]
    base: int
    router: int
    block_kinds: List[str] = field(default_factory=list)
    large_total: int = field(init=False)

    def __post_init__(self) -> None:
        if any(f < 0 for f in self.per_block) or self.base < 0 or self.router < 0:
            raise ConfigError("FLOPs entries must be non-negative")
        self.large_total = self.base + self.router + sum(self.per_block)


def linear_flops(din: int, dout: int, rows: int = 1) -> int:
    """Bare matmul cost of a linear map applied to `rows` rows."""
    return 2 * rows * din * dout


def conv_flops(cin: int, cout: int, k: int, howo: int) -> int:
    """Bare multiply-accumulate cost of a conv producing howo output cells."""
    return 2 * cout * cin * k * k * howo


def _linear(rows: int, din: int, dout: int, bias: bool = True) -> int:
    return linear_flops(din, dout, rows) + (rows * dout if bias else 0)


def _conv(cin: int, cout: int, k: int, howo: int) -> int:
    return conv_flops(cin, cout, k, howo) + cout * howo


def _time_class_embed(dim: int, num_classes: int) -> int:
    # sinusoidal features are precomputed constants; MLP + class lookup + add
    return _linear(1, dim, dim) + dim + _linear(1, dim, dim) + _linear(1, num_classes, dim, bias=False) + dim


def _resblock(c: int, hw: int, d: int) -> int:
    per_conv = _conv(c, c, 3, hw)
    gn = 3 * c * hw  # normalize + affine scale + shift
    silu = c * hw
    emb_path = d + _linear(1, d, c)  # silu(emb) then projection
    adds = 2 * c * hw  # timestep add + residual add
    return 2 * per_conv + 2 * gn + 2 * silu + emb_path + adds


def _transformer(n: int, c: int, heads: int, d: int, mlp_ratio: int) -> int:
    m = mlp_ratio * c
    mods = d + 6 * _linear(1, d, c)           # silu(emb) + six modulation maps
    ln_mod = 2 * (n * c + c + n * c + n * c)  # two of: LN, 1+scale, mul, shift add
    qkvo = 4 * _linear(n, c, c)
    attn = 2 * n * n * c + heads * n * n + heads * n * n + 2 * n * n * c  # scores, scale, softmax, mix
    gates = 2 * (n * c + n * c)               # gate mul + residual add, twice
    mlp = _linear(n, c, m) + n * m + _linear(n, m, c)
    return mods + ln_mod + qkvo + attn + gates + mlp


def count_block_flops(spec: BlockSpec) -> int:
    """Forward cost of one backbone/control block for a single sample."""
    kind, meta = spec.kind, spec.meta
    if kind == "conv-resblock":
        return _resblock(meta["channels"], meta["hw"], meta["emb_dim"])
    if kind == "transformer-block":
        return _transformer(meta["tokens"], meta["width"], meta["heads"],
                            meta["emb_dim"], meta["mlp_ratio"])
    if kind == "downsample":
        # 2x2 average pool (counted at input size) then stride-1 conv
        return 4 * meta["cin"] * meta["hw_out"] + _conv(meta["cin"], meta["cout"], 3, meta["hw_out"])
    if kind == "upsample":
        return _conv(meta["cin"], meta["cout"], 3, meta["hw_in"])
    if kind == "embed":
        tc = _time_class_embed(meta["emb_dim"], meta["num_classes"])
        if "tokens" in meta:  # patchify stem
            n, c = meta["tokens"], meta["width"]
            return tc + _linear(n, meta["patch_dim"], c) + n * c
        return tc + _conv(meta["c_img"], meta["c0"], 3, meta["hw"])
    if kind == "head":
        if "tokens" in meta:  # modulated final layer back to pixels
            n, c = meta["tokens"], meta["width"]
            return (meta["emb_dim"] + 2 * _linear(1, meta["emb_dim"], c)
                    + n * c + c + 2 * n * c + _linear(n, c, meta["patch_dim"]))
        c, hw = meta["cin"], meta["hw"]
        return 3 * c * hw + c * hw + _conv(c, meta["cout"], 3, hw)
    raise ConfigError(f"unknown block kind {kind!r}")


def zero_module_flops(spec: BlockSpec) -> int:
    """Cost of the zero module attached to a gateable block's output."""
    if len(spec.out_shape) == 3:  # (C,H,W): 1x1 conv
        c, h, w = spec.out_shape
        return _conv(c, c, 1, h * w)
    n, c = spec.out_shape  # (N,C): linear map
    return _linear(n, c, c)


def router_flops(spec: BlockSpec) -> int:
    """Cost of the router reading the block's input latent."""
    if len(spec.in_shape) == 3:
        c = spec.in_shape[0]
        hw = spec.in_shape[1] * spec.in_shape[2]
        hidden = max(2, c // 8)
        return c * hw + _linear(1, c, hidden) + hidden + _linear(1, hidden, 1)
    n, c = spec.in_shape
    o = max(1, c // 64)
    return 2 * n * c + _linear(1, c, o) + _linear(1, n, o) + 2 * o + o + _linear(1, o, 1)


MaskLike = Union[float, int, Tensor]


def flops_ratio(masks: Sequence[MaskLike], table: FlopsTable):
    """Branch cost under the given per-block masks, relative to all-on.

    Masks may be floats (reporting) or scalar/batched Tensors (training, so
    the gradient reaches the soft masks). Router and base cost sit in both
    numerator and denominator: the branch always executes them.
    """
    if len(masks) != len(table.per_block):
        raise UsageError(f"expected {len(table.per_block)} masks, got {len(masks)}")
    total = float(table.large_total)
    if any(isinstance(m, Tensor) for m in masks):
        acc = (table.base + table.router) / total
        for m, f in zip(masks, table.per_block):
            m = m if isinstance(m, Tensor) else Tensor(np.asarray(m, dtype=np.float32))
            acc = m.scale(f / total) + acc
        return acc
    num = float(table.base + table.router)
    for m, f in zip(masks, table.per_block):
        num += float(m) * f
    return num / total


def cost_loss(ratios, gamma: float):
    """Batch-mean squared deviation of the realized ratio from the target."""
    if isinstance(ratios, Tensor):
        if ratios.size == 0:
            raise UsageError("empty batch")
        d = ratios - gamma
        return (d * d).mean()
    ratios = list(ratios)
    if not ratios:
        raise UsageError("empty batch")
    if any(isinstance(r, Tensor) for r in ratios):
        acc = None
        for r in ratios:
            r = r if isinstance(r, Tensor) else Tensor(np.asarray(r, dtype=np.float32))
            d = r - gamma
            sq = d * d
            acc = sq if acc is None else acc + sq
        return acc.scale(1.0 / len(ratios)).reshape(())
    return sum((float(r) - gamma) ** 2 for r in ratios) / len(ratios)


def diffusion_loss(pred, target):
    """Mean squared error over batch and all elements."""
    if isinstance(pred, Tensor) or isinstance(target, Tensor):
        pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred))
        target = target if isinstance(target, Tensor) else Tensor(np.asarray(target))
        if pred.shape != target.shape:
            raise UsageError(f"shape mismatch: {pred.shape} vs {target.shape}")
        d = pred - target
        return (d * d).mean()
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise UsageError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(((pred - target) ** 2).mean())


def total_loss(l_sd, l_c, lambda_c: float):
    """Combined objective: diffusion loss plus weighted cost loss."""
    if isinstance(l_sd, Tensor) or isinstance(l_c, Tensor):
        l_sd = l_sd if isinstance(l_sd, Tensor) else Tensor(np.asarray(l_sd, dtype=np.float32))
        l_c = l_c if isinstance(l_c, Tensor) else Tensor(np.asarray(l_c, dtype=np.float32))
        return l_sd + l_c.scale(lambda_c)
    return float(l_sd) + lambda_c * float(l_c)
