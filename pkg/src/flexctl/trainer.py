"""End-to-end training: backbone pretraining, then the control branch with
warm-up (masks pinned to 1, routers idle) followed by routed training against
the combined diffusion + cost objective.

Reproducibility contract: every random draw derives from the config seed.
Dataset samples are keyed by (seed, index); model init and the per-step
noise use dedicated spawn keys, with the step index folded in so a resumed
run continues on the same stream.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .backbone import (
    Conditioning,
    TinyDiT,
    TinyDiTConfig,
    TinyUNet,
    TinyUNetConfig,
    assert_frozen,
)
from .budget import cost_loss, diffusion_loss, total_loss
from .control import ControlBranch, ControlMode, composed_forward, init_from_backbone
from .data import generate_synthetic
from .diffusion import (
    ConfigError,
    FlowSchedule,
    flow_sample,
    flow_velocity_target,
    make_linear_schedule,
    q_sample,
)
from .fileio import decode_json, decode_text, encode_json, encode_text, read_checkpoint, write_checkpoint
from .router import GumbelParams
from .tensor import Tensor

# spawn keys for the independent random streams of a run
_SK_BACKBONE_INIT = 1_000_001
_SK_PRETRAIN = 1_000_002
_SK_BRANCH_INIT = 1_000_003
_SK_TRAIN = 1_000_004


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    backbone_kind: str = "unet"
    mode: str = "flex"
    gamma: float = 0.5
    lambda_c: float = 0.5
    lr: float = 1e-3  # desk-scale default; the reference fine-tuning rate 1e-5 stays selectable
    weight_decay: float = 0.0
    warmup_steps: Optional[int] = None  # None -> 20% of max_steps
    max_steps: int = 2000
    batch: int = 16
    grad_accum: int = 1
    seed: int = 0
    dataset_size: int = 4096
    pretrain_steps: int = 2000
    backbone_ckpt: str = "runs/backbone.ckpt"
    output_ckpt: str = "runs/control.ckpt"
    progress_log: Optional[str] = None
    backbone_overrides: dict = field(default_factory=dict)

    def resolved_warmup(self) -> int:
        if self.warmup_steps is None:
            return self.max_steps // 5
        return self.warmup_steps

    def validate(self) -> None:
        if self.backbone_kind not in ("unet", "dit"):
            raise ConfigError(f"backbone_kind must be unet or dit, got {self.backbone_kind!r}")
        ControlMode.parse(self.mode)
        if self.batch < 1 or self.grad_accum < 1:
            raise ConfigError("batch and grad_accum must be >= 1")
        if self.resolved_warmup() > self.max_steps:
            raise ConfigError("warmup_steps must not exceed max_steps")
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.lambda_c < 0.0 or self.lr <= 0.0:
            raise ConfigError("lambda_c must be >= 0 and lr > 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


def backbone_config(kind: str, overrides: Optional[dict] = None):
    overrides = dict(overrides or {})
    for key in ("image_size", "stage_channels"):
        if key in overrides:
            overrides[key] = tuple(overrides[key])
    return TinyUNetConfig(**overrides) if kind == "unet" else TinyDiTConfig(**overrides)


def build_backbone_for(kind: str, cfg, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(_SK_BACKBONE_INIT,)))
    return TinyUNet(cfg, rng) if kind == "unet" else TinyDiT(cfg, rng)


class AdamW:
    """Adaptive moments with bias correction and decoupled weight decay."""

    def __init__(self, params: Dict[str, Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.wd:
                update = update + self.wd * p.data
            p.data = (p.data - self.lr * update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {"t": np.array(float(self.t), dtype=np.float32)}
        out.update({f"m.{k}": v for k, v in self.m.items()})
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = np.asarray(state[f"m.{k}"], dtype=np.float32).reshape(self.m[k].shape)
            self.v[k] = np.asarray(state[f"v.{k}"], dtype=np.float32).reshape(self.v[k].shape)


@dataclass
class TrainState:
    config: TrainConfig
    backbone: object
    branch: ControlBranch
    optimizer: AdamW
    schedule: object
    step: int = 0


# ----------------------------------------------------------------------
# batching helpers
# ----------------------------------------------------------------------

def _step_rng(seed: int, stream: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream, step)))


def _draw_batch(dataset, rng, batch: int):
    idx = rng.integers(0, len(dataset), size=batch)
    x0 = np.stack([dataset[i].image for i in idx])
    c_s = np.stack([dataset[i].condition for i in idx])
    cls = np.array([dataset[i].class_id for i in idx])
    return x0, c_s, cls


def _corrupt(kind: str, schedule, x0: np.ndarray, rng) -> tuple:
    """Per-sample timestep + noise; returns (x_t, t, regression target)."""
    b = x0.shape[0]
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    if kind == "unet":
        t = rng.integers(1, schedule.T + 1, size=b)
        x_t = q_sample(x0, t, eps, schedule)
        return x_t.astype(np.float32), t, eps
    t = rng.random(b)
    x_t = flow_sample(x0, t, eps, schedule)
    return x_t.astype(np.float32), t, flow_velocity_target(x0, eps).astype(np.float32)


# ----------------------------------------------------------------------
# backbone pretraining
# ----------------------------------------------------------------------

def pretrain_backbone(config: TrainConfig, dataset=None, log=None):
    """Class-conditional denoiser training with no spatial control; the
    result is saved frozen and reused by every control-branch run."""
    config.validate()
    kind = config.backbone_kind
    bb_cfg = backbone_config(kind, config.backbone_overrides)
    net = build_backbone_for(kind, bb_cfg, config.seed)
    schedule = make_linear_schedule(1000) if kind == "unet" else FlowSchedule()
    if dataset is None:
        dataset = generate_synthetic(config.seed, config.dataset_size)
    opt = AdamW(net.params.tensors, lr=config.lr, weight_decay=config.weight_decay)
    losses = []
    for step in range(config.pretrain_steps):
        rng = _step_rng(config.seed, _SK_PRETRAIN, step)
        x0, _, cls = _draw_batch(dataset, rng, config.batch)
        x_t, t, target = _corrupt(kind, schedule, x0, rng)
        cond = Conditioning(class_id=cls, t=t, spatial=None)
        opt.zero_grad()
        pred = net.forward(x_t, cond)
        loss = diffusion_loss(pred, Tensor(target))
        val = loss.item()
        if not math.isfinite(val):
            raise TrainingDiverged(f"pretrain loss became {val} at step {step}")
        loss.backward()
        opt.step()
        losses.append(val)
        if log and step % 100 == 0:
            log(f"pretrain step {step}: loss {val:.4f}")
    net.freeze()
    save_backbone_checkpoint(config.backbone_ckpt, net)
    return net, losses


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

def _backbone_cfg_dict(net) -> dict:
    return dataclasses.asdict(net.config)


def save_backbone_checkpoint(path, net) -> None:
    records = {
        "meta.arch": encode_text(net.kind),
        "meta.config": encode_json(_backbone_cfg_dict(net)),
    }
    records.update({f"model.{k}": v for k, v in net.params.state_dict().items()})
    write_checkpoint(path, records)


def load_backbone_checkpoint(path):
    records = read_checkpoint(path)
    kind = decode_text(records["meta.arch"])
    cfg = backbone_config(kind, decode_json(records["meta.config"]))
    net = build_backbone_for(kind, cfg, seed=0)
    net.params.load_state_dict({k[len("model."):]: v for k, v in records.items()
                                if k.startswith("model.")})
    net.freeze()
    return net


def save_train_checkpoint(path, state: TrainState) -> None:
    records = {
        "meta.arch": encode_text(state.backbone.kind),
        "meta.backbone_config": encode_json(_backbone_cfg_dict(state.backbone)),
        "meta.config": encode_json(state.config.to_dict()),
        "meta.step": np.array(float(state.step), dtype=np.float32),
    }
    records.update({f"backbone.{k}": v for k, v in state.backbone.params.state_dict().items()})
    records.update({f"model.{k}": v for k, v in state.branch.state_dict().items()})
    records.update({f"opt.{k}": v for k, v in state.optimizer.state_dict().items()})
    write_checkpoint(path, records)


def load_train_checkpoint(path) -> TrainState:
    records = read_checkpoint(path)
    config = TrainConfig.from_dict(decode_json(records["meta.config"]))
    kind = decode_text(records["meta.arch"])
    bb_cfg = backbone_config(kind, decode_json(records["meta.backbone_config"]))
    backbone = build_backbone_for(kind, bb_cfg, config.seed)
    backbone.params.load_state_dict({k[len("backbone."):]: v for k, v in records.items()
                                     if k.startswith("backbone.")})
    backbone.freeze()
    branch = _build_branch(backbone, config)
    branch.load_state_dict({k[len("model."):]: v for k, v in records.items()
                            if k.startswith("model.")})
    optimizer = AdamW(branch.trainable_params(), lr=config.lr, weight_decay=config.weight_decay)
    optimizer.load_state_dict({k[len("opt."):]: v for k, v in records.items()
                               if k.startswith("opt.")})
    schedule = make_linear_schedule(1000) if kind == "unet" else FlowSchedule()
    return TrainState(config=config, backbone=backbone, branch=branch,
                      optimizer=optimizer, schedule=schedule,
                      step=int(records["meta.step"]))


def _build_branch(backbone, config: TrainConfig) -> ControlBranch:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed,
                                                       spawn_key=(_SK_BRANCH_INIT,)))
    return init_from_backbone(backbone, config.mode, rng, GumbelParams())


# ----------------------------------------------------------------------
# control training
# ----------------------------------------------------------------------

def init_train_state(config: TrainConfig, backbone=None) -> TrainState:
    config.validate()
    if backbone is None:
        backbone = load_backbone_checkpoint(config.backbone_ckpt)
    branch = _build_branch(backbone, config)
    optimizer = AdamW(branch.trainable_params(), lr=config.lr, weight_decay=config.weight_decay)
    schedule = make_linear_schedule(1000) if config.backbone_kind == "unet" else FlowSchedule()
    return TrainState(config=config, backbone=backbone, branch=branch,
                      optimizer=optimizer, schedule=schedule, step=0)


def train_step(state: TrainState, dataset) -> dict:
    """One optimizer step (possibly several accumulated micro-batches)."""
    cfg = state.config
    warmup = state.step < cfg.resolved_warmup()
    rng = _step_rng(cfg.seed, _SK_TRAIN, state.step)
    before = state.backbone.snapshot()
    state.optimizer.zero_grad()

    metrics = {"l_sd": 0.0, "l_c": 0.0, "l_total": 0.0, "sparsity": 0.0}
    flex = state.branch.mode is ControlMode.FLEX
    for _ in range(cfg.grad_accum):
        x0, c_s, cls = _draw_batch(dataset, rng, cfg.batch)
        x_t, t, target = _corrupt(cfg.backbone_kind, state.schedule, x0, rng)
        cond = Conditioning(class_id=cls, t=t, spatial=c_s)
        force = np.ones(len(state.branch.gates)) if (warmup and flex) else None
        pred, res = composed_forward(state.backbone, state.branch, x_t, cond,
                                     "train", rng=rng, force_mask=force)
        l_sd = diffusion_loss(pred, Tensor(target))
        l_c = cost_loss(res.ratio_st, cfg.gamma)
        l_total = total_loss(l_sd, l_c, cfg.lambda_c)
        val = l_total.item()
        if not math.isfinite(val):
            raise TrainingDiverged(f"loss became {val} at step {state.step}")
        l_total.scale(1.0 / cfg.grad_accum).backward()
        metrics["l_sd"] += l_sd.item() / cfg.grad_accum
        metrics["l_c"] += l_c.item() / cfg.grad_accum
        metrics["l_total"] += val / cfg.grad_accum
        metrics["sparsity"] += float(res.hard_ratio.mean()) / cfg.grad_accum

    state.optimizer.step()
    if not assert_frozen(before, state.backbone):
        raise AssertionError("backbone parameters changed during a control-branch step")
    state.step += 1
    return metrics


def train(config: TrainConfig, backbone=None, dataset=None, resume=None, log=None) -> TrainState:
    """Full control-branch run; writes the output checkpoint and progress CSV."""
    if resume is not None:
        state = load_train_checkpoint(resume)
        config = state.config
    else:
        state = init_train_state(config, backbone)
    if dataset is None:
        dataset = generate_synthetic(config.seed, config.dataset_size)

    progress_path = Path(config.progress_log or Path(config.output_ckpt).with_suffix(".progress.csv"))
    progress_path.parent.mkdir(parents=True, exist_ok=True)
    fresh = resume is None or not progress_path.exists()
    with open(progress_path, "w" if fresh else "a") as progress:
        if fresh:
            progress.write("step,l_sd,l_c,l_total,sparsity,seconds\n")
        while state.step < config.max_steps:
            t0 = time.perf_counter()
            metrics = train_step(state, dataset)
            dt = time.perf_counter() - t0
            progress.write(f"{state.step},{metrics['l_sd']:.6f},{metrics['l_c']:.6f},"
                           f"{metrics['l_total']:.6f},{metrics['sparsity']:.6f},{dt:.3f}\n")
            if log and state.step % 100 == 0:
                log(f"step {state.step}: l_sd {metrics['l_sd']:.4f} l_c {metrics['l_c']:.4f} "
                    f"sparsity {metrics['sparsity']:.3f}")
    save_train_checkpoint(config.output_ckpt, state)
    return state
