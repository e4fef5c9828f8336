"""Trainable control branch: a weight-copy of the backbone with zero modules,
a condition encoder, and (in flex mode) one router per gateable block.

Three operating modes share one implementation:

* vanilla  -- the classic layout: UNet copies the encoder blocks only and
  injects into the mirrored decoder blocks; DiT copies half the blocks and
  each injection feeds two adjacent backbone blocks. No routers.
* large    -- copies every block, injects block-for-block. No routers.
* flex     -- same layout as large, plus routers that decide per sample and
  per timestep which blocks execute.

Training executes all blocks and mixes block output with its skip path using
the straight-through mask (hard value forward, soft gradient backward);
inference actually skips: a gated-off block, its zero module and its
injection are simply never evaluated.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import budget
from .backbone import Conditioning, TinyDiT, TinyUNet, _as_tensor
from .diffusion import ConfigError
from .nn import Conv, Linear, ParamStore, avgpool2x
from .router import GumbelParams, RouterDecision, RouterDiT, RouterUNet, decide
from .tensor import DimensionError, Tensor, UsageError


class ControlMode(enum.Enum):
    VANILLA = "vanilla"
    LARGE = "large"
    FLEX = "flex"

    @classmethod
    def parse(cls, value) -> "ControlMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown control mode {value!r}") from None


class ZeroModule:
    """1x1 conv (spatial) or linear map (tokens) with weights and bias
    initialized to exactly zero, so it contributes nothing until trained."""

    def __init__(self, ps: ParamStore, name: str, out_shape: tuple, dtype=np.float32):
        if len(out_shape) == 3:
            self.op = Conv(ps, name, out_shape[0], out_shape[0], 1, None, init="zero", dtype=dtype)
        else:
            self.op = Linear(ps, name, out_shape[1], out_shape[1], None, init="zero", dtype=dtype)

    def __call__(self, h: Tensor) -> Tensor:
        return self.op(h)


class ConditionEncoder:
    """Small conv stack mapping the spatial condition to the first gateable
    block's input shape, terminated by a zero module."""

    def __init__(self, ps: ParamStore, kind: str, config, rng: np.random.Generator, dtype=np.float32):
        self.kind = kind
        self.dtype = dtype
        side = config.image_size[1]
        if kind == "unet":
            c0 = config.stage_channels[0]
            mid = max(4, c0 // 2)
            self.chans = [(1, mid), (mid, mid), (mid, c0)]
            self.out_c = c0
            self.pool_before = None
            self.grid = side
        else:
            c = config.width
            if config.patch not in (1, 2):
                raise ConfigError("condition encoder supports patch sizes 1 and 2")
            self.grid = side // config.patch
            self.chans = [(1, c // 4), (c // 4, c // 2), (c // 2, c)]
            self.out_c = c
            # the token grid is half the image side at patch 2
            self.pool_before = 1 if config.patch == 2 else None
        self.hw_out = self.grid * self.grid
        self.convs = [Conv(ps, f"cond.conv{i}", cin, cout, 3, rng, pad=1, dtype=dtype)
                      for i, (cin, cout) in enumerate(self.chans)]
        self.zero = ZeroModule(ps, "cond.zero", (self.out_c, 1, 1), dtype)

    def __call__(self, c_s) -> Tensor:
        h = _as_tensor(c_s)
        if h.ndim != 4 or h.shape[1] != 1:
            raise DimensionError(f"condition must be (B,1,H,W), got {h.shape}")
        for i, conv in enumerate(self.convs):
            if self.pool_before == i:
                h = avgpool2x(h)
            h = conv(h).silu()
        h = self.zero(h)
        if self.kind == "dit":
            b = h.shape[0]
            h = h.reshape(b, self.out_c, self.hw_out).transpose(0, 2, 1)
        return h

    def flops(self) -> int:
        full = self.hw_out * (4 if self.pool_before is not None else 1)
        sizes = [full if (self.pool_before is not None and i < self.pool_before) else self.hw_out
                 for i in range(len(self.chans))]
        total = 0
        for i, ((cin, cout), howo) in enumerate(zip(self.chans, sizes)):
            if self.pool_before == i:
                total += cin * full  # average pool counts its input size
            total += budget._conv(cin, cout, 3, howo) + cout * howo  # conv + silu
        total += budget._conv(self.out_c, self.out_c, 1, self.hw_out)  # zero module
        return total


@dataclass
class GateEntry:
    ordinal: int
    index: int  # block index inside the branch network
    targets: tuple  # backbone block indices receiving this block's injection
    zero: ZeroModule
    router: Optional[object] = None


@dataclass
class ControlForwardResult:
    injections: Dict[int, Tensor]
    decisions: List[RouterDecision]
    flops_used: float
    hard_ratio: Optional[np.ndarray] = None   # per-sample, hard masks
    ratio_st: Optional[Tensor] = None         # per-sample, straight-through (train)
    mask_st: Optional[List[Tensor]] = None    # per-block straight-through masks (train)


def vanilla_layout(backbone) -> List[tuple]:
    """Injection wiring for vanilla mode: (branch block index, targets)."""
    gate = backbone.gateable_indices
    if backbone.kind == "unet":
        half = len(gate) // 2
        return [(gate[j], (gate[len(gate) - 1 - j],)) for j in range(half)]
    if len(gate) % 2:
        raise ConfigError("vanilla DiT wiring needs an even block count")
    half = len(gate) // 2
    return [(gate[k], (gate[2 * k], gate[2 * k + 1])) for k in range(half)]


class ControlBranch:
    """The trainable copy plus its control-specific machinery."""

    def __init__(self, backbone, mode, rng: np.random.Generator,
                 gumbel: Optional[GumbelParams] = None, dtype=np.float32):
        self.mode = ControlMode.parse(mode)
        self.kind = backbone.kind
        self.config = backbone.config
        self.gumbel = gumbel or GumbelParams()
        self.gumbel.validate()
        self.dtype = dtype

        if self.kind == "unet":
            self.net = TinyUNet(backbone.config, rng, dtype=dtype, enc_dec_skip=False)
        else:
            self.net = TinyDiT(backbone.config, rng, dtype=dtype)
        # the copy starts from the backbone weights, bit for bit
        self.net.params.load_state_dict({k: v.copy() for k, v in backbone.params.state_dict().items()})

        self.extra = ParamStore()
        self.cond_encoder = ConditionEncoder(self.extra, self.kind, backbone.config, rng, dtype)

        if self.mode is ControlMode.VANILLA:
            wiring = vanilla_layout(backbone)
        else:
            wiring = [(i, (i,)) for i in self.net.gateable_indices]

        used = {i for i, _ in wiring}
        self.exec_indices: List[int] = []
        for spec in self.net.block_specs[1:-1]:
            if spec.gateable and spec.index not in used:
                continue
            if not spec.gateable and spec.index > max(used):
                continue  # transitions after the last used block never run
            self.exec_indices.append(spec.index)

        self.gates: List[GateEntry] = []
        for ordinal, (idx, targets) in enumerate(wiring):
            spec = self.net.block_specs[idx]
            zero = ZeroModule(self.extra, f"zero.{ordinal}", spec.out_shape, dtype)
            router = None
            if self.mode is ControlMode.FLEX:
                if self.kind == "unet":
                    router = RouterUNet(self.extra, f"router.{ordinal}", spec.in_shape[0], rng, dtype=dtype)
                else:
                    router = RouterDiT(self.extra, f"router.{ordinal}", spec.in_shape[0], spec.in_shape[1],
                                       rng, dtype=dtype)
            self.gates.append(GateEntry(ordinal, idx, tuple(targets), zero, router))
        self._gate_by_index = {g.index: g for g in self.gates}

        self._drop_unused(used)
        for spec in self.net.block_specs:
            spec.flops = budget.count_block_flops(spec)
        self.flops_table = self._build_flops_table()

    # ------------------------------------------------------------------

    def _drop_unused(self, used: set) -> None:
        """Remove parameters of blocks the branch never executes: the head
        always, plus the unused remainder in vanilla mode."""
        drop = ["head."]
        exec_set = set(self.exec_indices)
        for spec in self.net.block_specs[1:-1]:
            if spec.index not in exec_set:
                drop.append(self.net._layer_names[spec.index] + ".")
        self.net.params.tensors = {
            name: t for name, t in self.net.params.tensors.items()
            if not any(name.startswith(p) for p in drop)
        }

    def named_params(self) -> Dict[str, Tensor]:
        out = {f"copy.{k}": v for k, v in self.net.params.tensors.items()}
        out.update({f"ctrl.{k}": v for k, v in self.extra.tensors.items()})
        return out

    def trainable_params(self) -> Dict[str, Tensor]:
        return self.named_params()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_params().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_params()
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))[:4]
            extra = sorted(set(state) - set(params))[:4]
            raise UsageError(f"state mismatch: missing={missing} extra={extra}")
        for k, t in params.items():
            arr = np.ascontiguousarray(state[k], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise UsageError(f"shape mismatch for {k}")
            t.data = arr

    def num_params(self) -> int:
        return sum(t.data.size for t in self.named_params().values())

    def router_param_count(self) -> int:
        return sum(t.data.size for k, t in self.extra.tensors.items() if k.startswith("router."))

    # ------------------------------------------------------------------

    def _build_flops_table(self) -> budget.FlopsTable:
        per_block, kinds = [], []
        base = self.cond_encoder.flops()
        router_total = 0
        base += budget.count_block_flops(self.net.block_specs[0])  # embed/stem
        first_in = self.net.block_specs[self.gates[0].index].in_shape
        base += int(np.prod(first_in))  # merging the encoded condition in
        for idx in self.exec_indices:
            spec = self.net.block_specs[idx]
            if spec.gateable:
                per_block.append(budget.count_block_flops(spec) + budget.zero_module_flops(spec))
                kinds.append(spec.kind)
                gate = self._gate_by_index[idx]
                if gate.router is not None:
                    router_total += budget.router_flops(spec)
            else:
                base += budget.count_block_flops(spec)
        return budget.FlopsTable(per_block=per_block, base=base, router=router_total, block_kinds=kinds)

    # ------------------------------------------------------------------

    def encode_condition(self, c_s) -> Tensor:
        return self.cond_encoder(c_s)

    def control_forward(self, x_t, cond: Conditioning, phase: str,
                        rng: Optional[np.random.Generator] = None,
                        force_mask: Optional[np.ndarray] = None,
                        st_offsets: Optional[Sequence[np.ndarray]] = None,
                        absent: Optional[set] = None) -> ControlForwardResult:
        """Run the branch and produce injections for the backbone.

        force_mask: per-gateable-block 0/1 overrides (ordinal order); routers
        are not evaluated for overridden blocks. In vanilla/large mode any
        mask input is a usage error (those modes are implicitly all-ones).
        st_offsets: test hook; replaces the detached straight-through offset
        with a fixed constant so the surrogate loss is differentiable.
        absent: ordinals to drop structurally (skip-equivalence checks).
        """
        if phase not in ("train", "infer"):
            raise UsageError(f"unknown phase {phase!r}")
        routed = self.mode is ControlMode.FLEX
        if not routed and (force_mask is not None or st_offsets is not None):
            raise UsageError(f"masks are implicit all-ones in {self.mode.value} mode")
        if force_mask is not None:
            force_mask = np.asarray(force_mask, dtype=np.float64)
            if force_mask.shape != (len(self.gates),):
                raise UsageError(f"force_mask needs shape ({len(self.gates)},), got {force_mask.shape}")
        if absent and phase == "train":
            raise UsageError("structural absence is an inference-only device")
        absent = absent or set()

        x = _as_tensor(x_t)
        batch = x.shape[0]
        if routed and phase == "infer" and force_mask is None and batch != 1:
            raise UsageError("routed inference runs one sample per pass")

        emb = self.net.compute_embedding(cond)
        if self.kind == "unet":
            h = self.net.stem(x)
        else:
            h = self.net.patchify(x)
        cond_feat = self.cond_encoder(cond.spatial)
        router_input_first = h  # scored before the condition merges in
        h = h + cond_feat

        injections: Dict[int, Tensor] = {}
        decisions: List[RouterDecision] = []
        mask_st: List[Tensor] = []
        hard_masks: List[np.ndarray] = []
        first_gate = True

        for idx in self.exec_indices:
            spec = self.net.block_specs[idx]
            if not spec.gateable:
                h = self.net.run_block(idx, h, emb)
                continue
            gate = self._gate_by_index[idx]
            if gate.ordinal in absent:
                first_gate = False
                continue
            r_in = router_input_first if first_gate else h
            first_gate = False

            if phase == "train":
                h, dec, m_st = self._train_gate(gate, h, r_in, emb, batch, rng,
                                                force_mask, st_offsets, injections)
                decisions.append(dec)
                mask_st.append(m_st)
                hard_masks.append(dec.hard)
            else:
                h, dec = self._infer_gate(gate, h, r_in, emb, force_mask, injections)
                decisions.append(dec)
                hard_masks.append(dec.hard)

        return self._finish(phase, batch, injections, decisions, mask_st, hard_masks, absent)

    def _train_gate(self, gate: GateEntry, h: Tensor, r_in: Tensor, emb: Tensor,
                    batch: int, rng, force_mask, st_offsets, injections):
        if not (self.mode is ControlMode.FLEX):
            dec = RouterDecision(k=np.full(batch, np.inf), k_prime=np.ones(batch),
                                 hard=np.ones(batch, dtype=np.float32))
            m_st = Tensor(np.ones(batch, dtype=h.dtype))
        elif force_mask is not None:
            val = float(force_mask[gate.ordinal])
            dec = RouterDecision(k=np.full(batch, val), k_prime=np.full(batch, val),
                                 hard=np.full(batch, val, dtype=np.float32))
            m_st = Tensor(np.full(batch, val, dtype=h.dtype))
        else:
            dec = decide(gate.router, r_in, "train", self.gumbel, rng=rng)
            if st_offsets is not None:
                m_st = dec.soft + Tensor(np.asarray(st_offsets[gate.ordinal], dtype=h.dtype))
            else:
                m_st = dec.soft + (Tensor(dec.hard.astype(h.dtype)) - dec.soft).detach()
        mexp = m_st.reshape((batch,) + (1,) * (h.ndim - 1))
        blk = self.net.run_block(gate.index, h, emb)
        h = blk * mexp + h * (mexp.scale(-1.0) + 1.0)
        y = gate.zero(h) * mexp
        for t in gate.targets:
            injections[t] = y
        return h, dec, m_st

    def _infer_gate(self, gate: GateEntry, h: Tensor, r_in: Tensor, emb: Tensor,
                    force_mask, injections):
        batch = h.shape[0]
        if not (self.mode is ControlMode.FLEX):
            dec = RouterDecision(k=np.full(batch, np.inf), k_prime=np.ones(batch),
                                 hard=np.ones(batch, dtype=np.float32))
            on = True
        elif force_mask is not None:
            val = float(force_mask[gate.ordinal])
            dec = RouterDecision(k=np.full(batch, val), k_prime=np.full(batch, val),
                                 hard=np.full(batch, val, dtype=np.float32))
            on = val > 0.5
        else:
            dec = decide(gate.router, r_in, "infer", self.gumbel)
            on = bool(dec.hard[0])
        if on:
            h = self.net.run_block(gate.index, h, emb)
            y = gate.zero(h)
            for t in gate.targets:
                injections[t] = y
        return h, dec

    def _finish(self, phase: str, batch: int, injections, decisions, mask_st,
                hard_masks, absent) -> ControlForwardResult:
        table = self.flops_table
        if hard_masks:
            hard = np.stack(hard_masks, axis=1)  # (B, L_present)
        else:
            hard = np.ones((batch, 0), dtype=np.float32)
        # absent blocks count as off when computing realized cost
        full = np.zeros((batch, len(self.gates)), dtype=np.float64)
        present = [g.ordinal for g in self.gates if g.ordinal not in absent]
        for col, ordinal in enumerate(present):
            full[:, ordinal] = hard[:, col]
        hard_ratio = np.array([budget.flops_ratio(list(full[b]), table) for b in range(batch)])

        result = ControlForwardResult(
            injections=injections,
            decisions=decisions,
            flops_used=float(hard_ratio.mean() * table.large_total),
            hard_ratio=hard_ratio,
        )
        if phase == "train":
            result.mask_st = mask_st
            result.ratio_st = budget.flops_ratio(mask_st, table)
        return result


def init_from_backbone(backbone, mode, rng: np.random.Generator,
                       gumbel: Optional[GumbelParams] = None, dtype=np.float32) -> ControlBranch:
    """Build the trainable branch for a frozen backbone."""
    return ControlBranch(backbone, mode, rng, gumbel, dtype)


def composed_forward(backbone, branch: ControlBranch, x_t, cond: Conditioning,
                     phase: str, **kwargs):
    """Control branch then backbone-with-injections; the full model output."""
    result = branch.control_forward(x_t, cond, phase, **kwargs)
    pred = backbone.forward(x_t, cond, result.injections)
    return pred, result
