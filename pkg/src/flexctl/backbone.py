"""Frozen desk-scale denoisers with per-block injection points.

Both networks expose the same surface: an ordered list of BlockSpec entries,
a forward pass that accepts a map of additive injections keyed by block
index, and freeze/assert_frozen for the training contract. Gateable blocks
are exactly the shape-preserving ones; transitions, the stem and the head
always execute.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .diffusion import ConfigError
from .nn import Conv, GroupNormAffine, ParamStore, ResBlock, TimeClassEmbed, TransformerBlock, avgpool2x
from .tensor import DimensionError, Tensor, UsageError


@dataclass
class BlockSpec:
    index: int
    kind: str  # conv-resblock | transformer-block | downsample | upsample | embed | head
    in_shape: tuple
    out_shape: tuple
    gateable: bool
    flops: int = 0
    meta: dict = field(default_factory=dict)


@dataclass
class TinyUNetConfig:
    image_size: tuple = (3, 16, 16)
    stage_channels: tuple = (16, 32)
    resblocks_per_stage: int = 2
    time_embed_dim: int = 64
    num_classes: int = 8

    def validate(self) -> None:
        if len(self.image_size) != 3:
            raise ConfigError("image_size must be (C, H, W)")
        if not self.stage_channels or any(c <= 0 for c in self.stage_channels):
            raise ConfigError("stage_channels must be positive")
        if self.resblocks_per_stage < 1:
            raise ConfigError("resblocks_per_stage must be >= 1")
        side = self.image_size[1]
        if side % (2 ** (len(self.stage_channels) - 1)):
            raise ConfigError("image side must be divisible by the downsampling factor")


@dataclass
class TinyDiTConfig:
    image_size: tuple = (3, 16, 16)
    patch: int = 2
    width: int = 64
    depth: int = 8
    heads: int = 4
    num_classes: int = 8

    def validate(self) -> None:
        if self.width % self.heads:
            raise ConfigError("width must be divisible by heads")
        if self.width < 64:
            raise ConfigError("width must be >= 64")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.image_size[1] % self.patch or self.image_size[2] % self.patch:
            raise ConfigError("image sides must be divisible by patch")


@dataclass
class Conditioning:
    """Per-sample conditioning: class id (stands in for a text prompt),
    timestep, and the spatial condition image used by the control branch."""

    class_id: np.ndarray
    t: np.ndarray
    spatial: Optional[object] = None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


class _BackboneBase:
    kind: str

    def __init__(self) -> None:
        self.params = ParamStore()
        self.block_specs: List[BlockSpec] = []
        self._layers: Dict[int, object] = {}
        self._layer_names: Dict[int, str] = {}

    def _add_layer(self, idx: int, name: str, layer) -> None:
        self._layers[idx] = layer
        self._layer_names[idx] = name

    @property
    def gateable_indices(self) -> List[int]:
        return [s.index for s in self.block_specs if s.gateable]

    def freeze(self) -> None:
        self.params.set_requires_grad(False)

    def snapshot(self) -> Dict[str, np.ndarray]:
        return self.params.snapshot()

    def _check_injections(self, injections: Dict[int, Tensor], batch: int) -> None:
        gateable = set(self.gateable_indices)
        for idx, tensor in injections.items():
            if idx not in gateable:
                raise UsageError(f"block {idx} is not an injection site")
            spec = self.block_specs[idx]
            want = (batch,) + spec.out_shape
            if tuple(tensor.shape) != want:
                raise DimensionError(f"injection at block {idx}: {tensor.shape} != {want}")


def assert_frozen(before: Dict[str, np.ndarray], model: _BackboneBase) -> bool:
    """True iff every parameter is bit-identical to the snapshot."""
    state = model.params.state_dict()
    if set(before) != set(state):
        return False
    return all(np.array_equal(before[k], state[k]) for k in state)


class TinyUNet(_BackboneBase):
    """Conv UNet: stem, two resblock stages down, two stages up, head.
    The single encoder-to-decoder residual skip is additive so that every
    resblock keeps in_shape == out_shape."""

    kind = "unet"

    def __init__(self, config: TinyUNetConfig, rng: np.random.Generator,
                 dtype=np.float32, enc_dec_skip: bool = True):
        super().__init__()
        config.validate()
        self.config = config
        self.dtype = dtype
        self.enc_dec_skip = enc_dec_skip
        c_img, side, _ = config.image_size
        chans = list(config.stage_channels)
        nres = config.resblocks_per_stage
        emb_dim = config.time_embed_dim
        ps = self.params

        self.embed = TimeClassEmbed(ps, "embed.tc", emb_dim, config.num_classes, rng,
                                    time_scale=1.0, dtype=dtype)
        self.stem = Conv(ps, "embed.stem", c_img, chans[0], 3, rng, pad=1, dtype=dtype)
        self._spec("embed", (c_img, side, side), (chans[0], side, side),
                   meta={"emb_dim": emb_dim, "num_classes": config.num_classes,
                         "c_img": c_img, "c0": chans[0], "hw": side * side})

        res_meta = lambda c, s: {"channels": c, "hw": s * s, "emb_dim": emb_dim}

        # encoder
        sides = [side // (2 ** i) for i in range(len(chans))]
        for stage, c in enumerate(chans):
            s = sides[stage]
            for r in range(nres):
                idx = self._spec("conv-resblock", (c, s, s), (c, s, s), gateable=True,
                                 meta=res_meta(c, s))
                self._add_layer(idx, f"enc.{stage}.{r}", ResBlock(ps, f"enc.{stage}.{r}", c, emb_dim, rng, dtype))
            if stage + 1 < len(chans):
                idx = self._spec("downsample", (c, s, s), (chans[stage + 1], s // 2, s // 2),
                                 meta={"cin": c, "cout": chans[stage + 1], "hw_out": (s // 2) ** 2})
                self._add_layer(idx, f"down.{stage}", Conv(ps, f"down.{stage}", c, chans[stage + 1], 3, rng,
                                                           pad=1, dtype=dtype))
        # decoder (mirror)
        for stage in reversed(range(len(chans))):
            c, s = chans[stage], sides[stage]
            for r in range(nres):
                idx = self._spec("conv-resblock", (c, s, s), (c, s, s), gateable=True,
                                 meta=res_meta(c, s))
                self._add_layer(idx, f"dec.{stage}.{r}", ResBlock(ps, f"dec.{stage}.{r}", c, emb_dim, rng, dtype))
            if stage > 0:
                idx = self._spec("upsample", (c, s, s), (chans[stage - 1], s * 2, s * 2),
                                 meta={"cin": c, "cout": chans[stage - 1], "hw_in": s * s})
                self._add_layer(idx, f"up.{stage}", Conv(ps, f"up.{stage}", c, chans[stage - 1], 3, rng,
                                                         pad=1, dtype=dtype))

        self.head_norm = GroupNormAffine(ps, "head.gn", chans[0], dtype)
        self.head_conv = Conv(ps, "head.conv", chans[0], c_img, 3, rng, pad=1, init="zero", dtype=dtype)
        self._spec("head", (chans[0], side, side), (c_img, side, side),
                   meta={"cin": chans[0], "cout": c_img, "hw": side * side})

        # indices where the additive encoder->decoder skip is captured/applied:
        # output of the last stage-0 encoder resblock, input of the first
        # stage-0 decoder resblock (right after the upsample transition)
        enc_gate = [s.index for s in self.block_specs if s.gateable]
        self._skip_capture = enc_gate[nres - 1]
        self._skip_apply = [s.index for s in self.block_specs if s.kind == "upsample"][-1] if len(chans) > 1 else None

    def _spec(self, kind: str, in_shape: tuple, out_shape: tuple, gateable: bool = False,
              meta: Optional[dict] = None) -> int:
        idx = len(self.block_specs)
        self.block_specs.append(BlockSpec(idx, kind, in_shape, out_shape, gateable, 0, meta or {}))
        return idx

    def compute_embedding(self, cond: Conditioning) -> Tensor:
        return self.embed(cond.t, cond.class_id)

    def run_block(self, idx: int, h: Tensor, emb: Tensor) -> Tensor:
        spec = self.block_specs[idx]
        layer = self._layers[idx]
        if spec.kind == "conv-resblock":
            return layer(h, emb)
        if spec.kind == "downsample":
            return layer(avgpool2x(h))
        if spec.kind == "upsample":
            return layer(h).upsample2x()
        raise UsageError(f"block {idx} ({spec.kind}) is not runnable via run_block")

    def forward(self, x_t, cond: Conditioning, injections: Optional[Dict[int, Tensor]] = None) -> Tensor:
        h = _as_tensor(x_t)
        injections = injections or {}
        self._check_injections(injections, h.shape[0])
        emb = self.compute_embedding(cond)
        h = self.stem(h)
        skip = None
        for spec in self.block_specs[1:-1]:
            h = self.run_block(spec.index, h, emb)
            if spec.index in injections:
                h = h + injections[spec.index]
            if self.enc_dec_skip and spec.index == self._skip_capture:
                skip = h
            if self.enc_dec_skip and self._skip_apply is not None and spec.index == self._skip_apply:
                h = h + skip
        return self.head_conv(self.head_norm(h).silu())


class TinyDiT(_BackboneBase):
    """Patch transformer: patchify stem, identical pre-norm blocks with
    conditioning-driven modulation, linear head back to pixels."""

    kind = "dit"

    def __init__(self, config: TinyDiTConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        config.validate()
        self.config = config
        self.dtype = dtype
        c_img, side, _ = config.image_size
        p, c = config.patch, config.width
        self.grid = side // p
        self.tokens = self.grid * self.grid
        self.patch_dim = c_img * p * p
        ps = self.params

        self.embed = TimeClassEmbed(ps, "embed.tc", c, config.num_classes, rng,
                                    time_scale=1000.0, dtype=dtype)
        from .nn import Linear  # local import keeps module top uncluttered
        self.patch_in = Linear(ps, "embed.patch_in", self.patch_dim, c, rng, dtype=dtype)
        self.pos = ps.add("embed.pos", (rng.standard_normal((1, self.tokens, c)) * 0.02).astype(dtype))
        self._spec("embed", (c_img, side, side), (self.tokens, c),
                   meta={"emb_dim": c, "num_classes": config.num_classes,
                         "tokens": self.tokens, "patch_dim": self.patch_dim, "width": c})

        for d in range(config.depth):
            idx = self._spec("transformer-block", (self.tokens, c), (self.tokens, c), gateable=True,
                             meta={"tokens": self.tokens, "width": c, "heads": config.heads,
                                   "emb_dim": c, "mlp_ratio": TransformerBlock.MLP_RATIO})
            self._add_layer(idx, f"blocks.{d}", TransformerBlock(ps, f"blocks.{d}", c, config.heads, c, rng, dtype))

        self.head_shift = Linear(ps, "head.shift", c, c, rng, init="zero", dtype=dtype)
        self.head_scale = Linear(ps, "head.scale", c, c, rng, init="zero", dtype=dtype)
        self.head_out = Linear(ps, "head.out", c, self.patch_dim, rng, init="zero", dtype=dtype)
        self._spec("head", (self.tokens, c), (c_img, side, side),
                   meta={"tokens": self.tokens, "width": c, "patch_dim": self.patch_dim, "emb_dim": c})

    def _spec(self, kind: str, in_shape: tuple, out_shape: tuple, gateable: bool = False,
              meta: Optional[dict] = None) -> int:
        idx = len(self.block_specs)
        self.block_specs.append(BlockSpec(idx, kind, in_shape, out_shape, gateable, 0, meta or {}))
        return idx

    def compute_embedding(self, cond: Conditioning) -> Tensor:
        return self.embed(cond.t, cond.class_id)

    def patchify(self, x: Tensor) -> Tensor:
        b = x.shape[0]
        c_img, side, _ = self.config.image_size
        p, g = self.config.patch, self.grid
        h = x.reshape(b, c_img, g, p, g, p).transpose(0, 2, 4, 3, 5, 1).reshape(b, self.tokens, self.patch_dim)
        return self.patch_in(h) + self.pos

    def unpatchify(self, tokens: Tensor) -> Tensor:
        b = tokens.shape[0]
        c_img, side, _ = self.config.image_size
        p, g = self.config.patch, self.grid
        return tokens.reshape(b, g, g, p, p, c_img).transpose(0, 5, 1, 3, 2, 4).reshape(b, c_img, side, side)

    def run_block(self, idx: int, h: Tensor, emb: Tensor) -> Tensor:
        return self._layers[idx](h, emb)

    def forward(self, x_t, cond: Conditioning, injections: Optional[Dict[int, Tensor]] = None) -> Tensor:
        h = _as_tensor(x_t)
        injections = injections or {}
        self._check_injections(injections, h.shape[0])
        emb = self.compute_embedding(cond)
        h = self.patchify(h)
        for spec in self.block_specs[1:-1]:
            h = self.run_block(spec.index, h, emb)
            if spec.index in injections:
                h = h + injections[spec.index]
        e = emb.silu()
        b = h.shape[0]
        sh = self.head_shift(e).reshape(b, 1, self.config.width)
        sc = self.head_scale(e).reshape(b, 1, self.config.width)
        h = h.layer_norm() * (sc + 1.0) + sh
        return self.unpatchify(self.head_out(h))


def build_backbone(kind: str, config, rng: np.random.Generator, dtype=np.float32):
    if kind == "unet":
        return TinyUNet(config or TinyUNetConfig(), rng, dtype)
    if kind == "dit":
        return TinyDiT(config or TinyDiTConfig(), rng, dtype)
    raise ConfigError(f"unknown backbone kind {kind!r}")
