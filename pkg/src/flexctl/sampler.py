"""Routed, block-skipping inference.

Each denoising step consults the routers block by block; a gated-off block,
its zero module and its injection are never evaluated. Every decision lands
in an ActivationLog row, one per (sample, step, gateable block), with the
step's realized branch FLOPs repeated across the step's rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .backbone import Conditioning
from .control import ControlMode
from .diffusion import (
    ConfigError,
    FlowSchedule,
    ddim_step,
    ddim_timesteps,
    make_linear_schedule,
    q_sample,
    rflow_step,
)
from .fileio import pixels_to_unit, read_pgm, read_ppm, to_pixels, write_ppm
from .tensor import UsageError, no_grad
from .trainer import load_train_checkpoint

_SK_SAMPLE = 2_000_001

LOG_COLUMNS = ("sample_id", "step_index", "timestep", "block_index", "hard", "k_prime", "flops_used")


class SkipCheckInapplicable(RuntimeError):
    """The requested (step, block) was active, so there is nothing to check."""


def ddim_step_clipped(x, eps_hat, t: int, t_prev: int, schedule):
    """One deterministic reverse step with the clean-image estimate clamped
    to the data range before recombining; keeps desk-scale trajectories from
    running off the manifold. Composed from the pure step primitives."""
    x0_hat = np.clip(ddim_step(x, eps_hat, t, 0, schedule), -1.0, 1.0)
    if t_prev == 0:
        return x0_hat
    return q_sample(x0_hat, t_prev, eps_hat, schedule)


class ActivationLog:
    """Append-only routing record; serializes to/from CSV."""

    def __init__(self, rows: Optional[List[tuple]] = None):
        self.rows: List[tuple] = rows or []

    def append(self, sample_id: int, step_index: int, timestep, block_index: int,
               hard: int, k_prime: float, flops_used: int) -> None:
        self.rows.append((sample_id, step_index, timestep, block_index, hard, k_prime, flops_used))

    def __len__(self) -> int:
        return len(self.rows)

    @staticmethod
    def _fmt_t(t) -> str:
        return str(int(t)) if float(t) == int(t) else f"{float(t):.6f}"

    def write_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            f.write(",".join(LOG_COLUMNS) + "\n")
            for sid, step, t, blk, hard, kp, fl in self.rows:
                f.write(f"{sid},{step},{self._fmt_t(t)},{blk},{int(hard)},{kp:.6f},{int(fl)}\n")

    @classmethod
    def read_csv(cls, path) -> "ActivationLog":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0].split(",") != list(LOG_COLUMNS):
            raise UsageError(f"bad activation log header in {path}")
        rows = []
        for i, line in enumerate(lines[1:], start=2):
            parts = line.split(",")
            if len(parts) != len(LOG_COLUMNS):
                raise UsageError(f"ragged log row at line {i} in {path}")
            sid, step, t, blk, hard, kp, fl = parts
            rows.append((int(sid), int(step), float(t), int(blk), int(hard), float(kp), int(fl)))
        return cls(rows)


@dataclass
class SampleConfig:
    ckpt: str
    mode: Optional[str] = None  # asserted against the checkpoint when set
    steps: int = 20
    sampler: str = "ddim"
    seed: int = 0
    class_id: int = 0
    cond_path: Optional[str] = None
    out_dir: str = "out"
    force_mask_path: Optional[str] = None

    def validate(self) -> None:
        if self.sampler not in ("ddim", "rflow"):
            raise ConfigError(f"sampler must be ddim or rflow, got {self.sampler!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")


def expected_sampler(kind: str) -> str:
    return "ddim" if kind == "unet" else "rflow"


def read_force_mask_csv(path, steps: int, blocks: int) -> Dict[int, np.ndarray]:
    """force-mask CSV: step_index,block_index,mask. Steps present must cover
    every gateable block; absent steps stay router-decided."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split(",") != ["step_index", "block_index", "mask"]:
        raise UsageError(f"bad force-mask header in {path}")
    per_step: Dict[int, dict] = {}
    for i, line in enumerate(lines[1:], start=2):
        s, b, m = line.split(",")
        per_step.setdefault(int(s), {})[int(b)] = float(m)
    out: Dict[int, np.ndarray] = {}
    for s, entries in per_step.items():
        if s < 0 or s >= steps:
            raise UsageError(f"force-mask step {s} outside [0, {steps})")
        if sorted(entries) != list(range(blocks)):
            raise UsageError(f"force-mask step {s} must cover all {blocks} blocks")
        out[s] = np.array([entries[b] for b in range(blocks)])
    return out


def schedule_to_force_rows(schedule: np.ndarray) -> List[tuple]:
    rows = []
    for s in range(schedule.shape[0]):
        for b in range(schedule.shape[1]):
            rows.append((s, b, int(schedule[s, b])))
    return rows


def write_force_mask_csv(path, schedule: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write("step_index,block_index,mask\n")
        for s, b, m in schedule_to_force_rows(schedule):
            f.write(f"{s},{b},{m}\n")


def run_sampling(backbone, branch, cond_image: np.ndarray, class_id: int,
                 steps: int, sampler_kind: str, seed: int,
                 force_schedule: Optional[Dict[int, np.ndarray]] = None,
                 absent: Optional[set] = None,
                 sample_id: int = 0,
                 log: Optional[ActivationLog] = None):
    """One seeded trajectory. cond_image is (1, H, W) in [0, 1]; returns the
    clamped image (3, H, W) and the log."""
    if expected_sampler(backbone.kind) != sampler_kind:
        raise ConfigError(f"sampler {sampler_kind!r} does not drive a {backbone.kind} backbone")
    log = log if log is not None else ActivationLog()
    force_schedule = force_schedule or {}
    absent = absent or set()
    c, side = backbone.config.image_size[0], backbone.config.image_size[1]
    if cond_image.shape != (1, side, side):
        raise UsageError(f"condition shape {cond_image.shape} != (1, {side}, {side})")

    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(_SK_SAMPLE,)))
    x = rng.standard_normal((1, c, side, side)).astype(np.float32)
    c_s = cond_image[None].astype(np.float32)

    if sampler_kind == "ddim":
        schedule = make_linear_schedule(1000)
        ts = ddim_timesteps(schedule.T, steps)
    else:
        schedule = FlowSchedule()
        ts = [1.0 - i / steps for i in range(steps)]

    with no_grad():
        for i in range(steps):
            t = ts[i]
            cond = Conditioning(class_id=np.array([class_id]), t=np.array([t]), spatial=c_s)
            step_absent = {b for (s, b) in absent if s == i}
            force = force_schedule.get(i)
            res = branch.control_forward(x, cond, "infer", force_mask=force, absent=step_absent)
            pred = backbone.forward(x, cond, res.injections).numpy()
            if sampler_kind == "ddim":
                t_prev = ts[i + 1] if i + 1 < steps else 0
                x = ddim_step_clipped(x, pred, t, t_prev, schedule).astype(np.float32)
            else:
                x = rflow_step(x, pred, -1.0 / steps).astype(np.float32)
            step_flops = int(round(res.flops_used))
            present = iter(res.decisions)
            for gate in branch.gates:
                if gate.ordinal in step_absent:
                    log.append(sample_id, i, t, gate.ordinal, 0, 0.0, step_flops)
                else:
                    d = next(present)
                    log.append(sample_id, i, t, gate.ordinal, int(d.hard[0]), float(d.k_prime[0]), step_flops)

    return np.clip(x[0], -1.0, 1.0), log


def read_condition(path) -> np.ndarray:
    """Condition map as (1, H, W) in [0, 1]; PGM directly, PPM via grayscale."""
    head = Path(path).read_bytes()[:2]
    if head == b"P6":
        return pixels_to_unit(read_ppm(path)).mean(axis=2, keepdims=False)[None]
    return pixels_to_unit(read_pgm(path))[None]


def run_backbone_sampling(backbone, class_id: int, steps: int, sampler_kind: str, seed: int) -> np.ndarray:
    """Unconditional (class-only) trajectory of the frozen backbone; shares
    the seeded start noise with run_sampling for like-for-like comparisons."""
    if expected_sampler(backbone.kind) != sampler_kind:
        raise ConfigError(f"sampler {sampler_kind!r} does not drive a {backbone.kind} backbone")
    c, side = backbone.config.image_size[0], backbone.config.image_size[1]
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(_SK_SAMPLE,)))
    x = rng.standard_normal((1, c, side, side)).astype(np.float32)
    if sampler_kind == "ddim":
        schedule = make_linear_schedule(1000)
        ts = ddim_timesteps(schedule.T, steps)
    else:
        schedule = FlowSchedule()
        ts = [1.0 - i / steps for i in range(steps)]
    with no_grad():
        for i in range(steps):
            cond = Conditioning(class_id=np.array([class_id]), t=np.array([ts[i]]), spatial=None)
            pred = backbone.forward(x, cond).numpy()
            if sampler_kind == "ddim":
                t_prev = ts[i + 1] if i + 1 < steps else 0
                x = ddim_step_clipped(x, pred, ts[i], t_prev, schedule).astype(np.float32)
            else:
                x = rflow_step(x, pred, -1.0 / steps).astype(np.float32)
    return np.clip(x[0], -1.0, 1.0)


def sample(cfg: SampleConfig):
    """File-level entry: load checkpoint, read condition, write image + log."""
    cfg.validate()
    state = load_train_checkpoint(cfg.ckpt)
    backbone, branch = state.backbone, state.branch
    if cfg.mode is not None and ControlMode.parse(cfg.mode) is not branch.mode:
        raise ConfigError(f"checkpoint holds a {branch.mode.value} branch, not {cfg.mode}")
    if cfg.cond_path is None:
        raise ConfigError("a condition image path is required")
    cond_image = read_condition(cfg.cond_path)
    force = None
    if cfg.force_mask_path is not None:
        if branch.mode is not ControlMode.FLEX:
            raise ConfigError("force-mask replay needs a flex checkpoint")
        force = read_force_mask_csv(cfg.force_mask_path, cfg.steps, len(branch.gates))
    img, log = run_sampling(backbone, branch, cond_image, cfg.class_id, cfg.steps,
                            cfg.sampler, cfg.seed, force_schedule=force)
    out = Path(cfg.out_dir)
    write_outputs(img, log, out / "sample.ppm", out / "log.csv")
    return img, log


def write_outputs(image: np.ndarray, log: ActivationLog, image_path, log_path) -> None:
    pix = to_pixels(image).transpose(1, 2, 0)
    write_ppm(image_path, pix)
    log.write_csv(log_path)


def log_mask_matrix(log: ActivationLog, sample_id: int, steps: int, blocks: int) -> np.ndarray:
    """Hard masks of one sample as a (steps, blocks) array."""
    out = np.zeros((steps, blocks))
    seen = np.zeros((steps, blocks), dtype=bool)
    for sid, step, _, blk, hard, _, _ in log.rows:
        if sid == sample_id:
            out[step, blk] = hard
            seen[step, blk] = True
    if not seen.all():
        raise UsageError(f"log does not cover sample {sample_id} fully")
    return out


def skip_equivalence_check(backbone, branch, cond_image: np.ndarray, class_id: int,
                           steps: int, sampler_kind: str, seed: int,
                           block_index: int, step_index: int,
                           force_schedule: Optional[Dict[int, np.ndarray]] = None,
                           natural: Optional[tuple] = None) -> bool:
    """Compare a routed run that skipped (step, block) against a run whose
    branch structurally lacks that block at that step.

    natural: optionally the (image, mask matrix) of the routed run, so a
    caller checking many skip events replays the reference once.
    """
    if natural is None:
        img_a, log = run_sampling(backbone, branch, cond_image, class_id, steps,
                                  sampler_kind, seed, force_schedule=force_schedule)
        masks = log_mask_matrix(log, 0, steps, len(branch.gates))
    else:
        img_a, masks = natural
    if masks[step_index, block_index] != 0:
        raise SkipCheckInapplicable(f"block {block_index} ran at step {step_index}")
    replay = {s: masks[s] for s in range(steps)}
    img_b, _ = run_sampling(backbone, branch, cond_image, class_id, steps,
                            sampler_kind, seed, force_schedule=replay,
                            absent={(step_index, block_index)})
    return bool(np.max(np.abs(img_a - img_b)) <= 1e-6)
