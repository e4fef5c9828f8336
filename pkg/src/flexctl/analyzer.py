"""Route statistics: activation matrices over (step, block), sparsity curves,
and retraining-free static schedule extraction from logged runs."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from .budget import FlopsTable, flops_ratio
from .fileio import write_pgm
from .sampler import ActivationLog, write_force_mask_csv
from .tensor import UsageError


class InfeasibleBudget(ValueError):
    pass


@dataclass
class ActivationMatrix:
    """Activation frequency per (denoising step, gateable block), early steps
    first; every cell is a mean of hard masks over samples."""

    cells: np.ndarray  # (steps, blocks) in [0, 1]
    timesteps: np.ndarray  # representative timestep per step row

    @property
    def steps(self) -> int:
        return self.cells.shape[0]

    @property
    def blocks(self) -> int:
        return self.cells.shape[1]


@dataclass
class StaticSchedule:
    """Fixed per-step activation plan; replayable through force-mask input."""

    plan: np.ndarray  # (steps, blocks) of 0/1
    target_budget: float
    realized_ratio: float


def aggregate(log: ActivationLog) -> ActivationMatrix:
    rows = log.rows
    if not rows:
        raise UsageError("empty activation log")
    steps = sorted({r[1] for r in rows})
    blocks = sorted({r[3] for r in rows})
    if steps != list(range(len(steps))) or blocks != list(range(len(blocks))):
        raise UsageError("log step/block indices are not contiguous from zero")
    samples = {r[0] for r in rows}
    counts = np.zeros((len(steps), len(blocks)))
    hits = np.zeros((len(steps), len(blocks)))
    tvals = np.zeros(len(steps))
    for sid, step, t, blk, hard, _, _ in rows:
        counts[step, blk] += 1
        hits[step, blk] += hard
        tvals[step] = t
    if not np.all(counts == len(samples)):
        raise UsageError("ragged log: expected one row per (sample, step, block)")
    return ActivationMatrix(cells=hits / counts, timesteps=tvals)


def sparsity_curve(matrix: ActivationMatrix, table: FlopsTable):
    """Per-step FLOPs-weighted ratios plus the run mean; the count-based
    curve (plain fraction of active blocks) rides along since the reference
    statistic is ambiguous between the two."""
    if matrix.blocks != len(table.per_block):
        raise UsageError(f"matrix has {matrix.blocks} blocks, table {len(table.per_block)}")
    flops = np.array([flops_ratio(list(row), table) for row in matrix.cells])
    counts = matrix.cells.mean(axis=1)
    return flops, counts, float(flops.mean())


def extract_static_schedule(matrix: ActivationMatrix, table: FlopsTable,
                            budget: float) -> StaticSchedule:
    """Greedy per-step fill by descending activation frequency (ties to the
    lower block index), then a global correction pass that lands the overall
    ratio within +/-0.05 of the budget."""
    if not (0.0 < budget <= 1.0):
        raise InfeasibleBudget(f"budget must be in (0, 1], got {budget}")
    if matrix.blocks != len(table.per_block):
        raise UsageError("matrix and table disagree on block count")
    floor = (table.base + table.router) / table.large_total
    if budget < floor:
        raise InfeasibleBudget(f"budget {budget} below the always-on floor {floor:.4f}")

    steps, blocks = matrix.steps, matrix.blocks
    per_step_target = budget * table.large_total
    plan = np.zeros((steps, blocks), dtype=np.int64)
    for s in range(steps):
        order = sorted(range(blocks), key=lambda b: (-matrix.cells[s, b], b))
        used = table.base + table.router
        for b in order:
            if used + table.per_block[b] > per_step_target:
                break
            plan[s, b] = 1
            used += table.per_block[b]

    def overall(p: np.ndarray) -> float:
        return float(np.mean([flops_ratio(list(p[s]), table) for s in range(steps)]))

    # correction pass: admit remaining (step, block) cells by descending
    # frequency whenever doing so moves the mean ratio closer to the budget
    ratio = overall(plan)
    candidates = [(s, b) for s in range(steps) for b in range(blocks) if not plan[s, b]]
    candidates.sort(key=lambda sb: (-matrix.cells[sb[0], sb[1]], sb[0], sb[1]))
    for s, b in candidates:
        inc = table.per_block[b] / (table.large_total * steps)
        if abs(ratio + inc - budget) < abs(ratio - budget):
            plan[s, b] = 1
            ratio += inc
    ratio = overall(plan)
    if abs(ratio - budget) > 0.05:
        raise InfeasibleBudget(f"no schedule lands within 0.05 of {budget}; best {ratio:.4f}")
    return StaticSchedule(plan=plan, target_budget=budget, realized_ratio=ratio)


# ----------------------------------------------------------------------
# export
# ----------------------------------------------------------------------

def write_matrix_csv(path, matrix: ActivationMatrix) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for row in matrix.cells:
            f.write(",".join(f"{v:.6f}" for v in row) + "\n")


def read_matrix_csv(path) -> np.ndarray:
    rows = [[float(v) for v in line.split(",")]
            for line in Path(path).read_text().splitlines() if line]
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise UsageError(f"ragged matrix CSV in {path}")
    return np.array(rows)


def write_matrix_pgm(path, matrix: ActivationMatrix) -> None:
    """One pixel per cell, activation frequency as 8-bit gray, no smoothing."""
    pix = np.clip(np.rint(matrix.cells * 255.0), 0, 255).astype(np.uint8)
    write_pgm(path, pix)


def write_sparsity_csv(path, flops_curve: np.ndarray, count_curve: np.ndarray,
                       run_mean: float) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write("step_index,flops_ratio,count_ratio\n")
        for i, (fr, cr) in enumerate(zip(flops_curve, count_curve)):
            f.write(f"{i},{fr:.6f},{cr:.6f}\n")
        f.write(f"MEAN,{run_mean:.6f},{count_curve.mean():.6f}\n")


def export(matrix: ActivationMatrix, out_dir, table: Optional[FlopsTable] = None,
           extract_budget: Optional[float] = None) -> dict:
    """Write the matrix CSV + PGM heatmap, and when a table is supplied the
    sparsity curves (and optionally a replayable static schedule)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"matrix_csv": out / "matrix.csv", "matrix_pgm": out / "matrix.pgm"}
    write_matrix_csv(paths["matrix_csv"], matrix)
    write_matrix_pgm(paths["matrix_pgm"], matrix)
    if table is not None:
        flops_curve, count_curve, run_mean = sparsity_curve(matrix, table)
        paths["sparsity_csv"] = out / "sparsity.csv"
        write_sparsity_csv(paths["sparsity_csv"], flops_curve, count_curve, run_mean)
        if extract_budget is not None:
            schedule = extract_static_schedule(matrix, table, extract_budget)
            paths["schedule_csv"] = out / "schedule.csv"
            write_force_mask_csv(paths["schedule_csv"], schedule.plan)
    return paths


def read_flops_csv(path) -> FlopsTable:
    """Parse the table printed by the flops subcommand."""
    per_block: List[int] = []
    kinds: List[str] = []
    specials = {}
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "block_index,kind,flops":
        raise UsageError(f"bad flops CSV header in {path}")
    for line in lines[1:]:
        idx, kind, val = line.split(",")
        if idx in ("BASE", "ROUTER", "LARGE_TOTAL"):
            specials[idx] = int(val)
            continue
        if int(idx) != len(per_block):
            raise UsageError("flops CSV block rows out of order")
        per_block.append(int(val))
        kinds.append(kind)
    table = FlopsTable(per_block=per_block, base=specials["BASE"],
                       router=specials["ROUTER"], block_kinds=kinds)
    if "LARGE_TOTAL" in specials and specials["LARGE_TOTAL"] != table.large_total:
        raise UsageError("flops CSV totals are inconsistent")
    return table


def write_flops_csv(table: FlopsTable, fh) -> None:
    fh.write("block_index,kind,flops\n")
    kinds = table.block_kinds or ["?"] * len(table.per_block)
    for i, (f, k) in enumerate(zip(table.per_block, kinds)):
        fh.write(f"{i},{k},{f}\n")
    fh.write(f"BASE,,{table.base}\n")
    fh.write(f"ROUTER,,{table.router}\n")
    fh.write(f"LARGE_TOTAL,,{table.large_total}\n")
