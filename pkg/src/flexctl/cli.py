"""flexctl: train / sample / analyze / flops / selftest.

Exit codes: 0 success, 1 usage error (bad flag or subcommand), 2 runtime
failure. One seed governs every random draw of a run; FLEXCTL_SEED in the
environment overrides any --seed flag.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> _Parser:
    p = _Parser(prog="flexctl",
                description="Dynamic, computation-aware conditional control for tiny diffusion models.")
    p.add_argument("--seed", dest="global_seed", type=int, default=None,
                   help="global seed (FLEXCTL_SEED env var overrides)")
    p.add_argument("--config", dest="global_config", default=None, help="config JSON (train/flops)")
    p.add_argument("--verbose", action="store_true", help="print progress")
    sub = p.add_subparsers(dest="command")

    t = sub.add_parser("train", help="pretrain the backbone if needed, then train the control branch")
    t.add_argument("--config", required=False, help="train config JSON")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")

    s = sub.add_parser("sample", help="routed inference from a trained checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--cond", required=True, help="condition image (PGM)")
    s.add_argument("--class", dest="class_id", type=int, default=0)
    s.add_argument("--steps", type=int, default=20)
    s.add_argument("--sampler", choices=("ddim", "rflow"), default="ddim")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", default="out")
    s.add_argument("--force-mask", dest="force_mask", default=None,
                   help="force-mask CSV: step_index,block_index,mask")

    a = sub.add_parser("analyze", help="activation statistics from a sampling log")
    a.add_argument("--log", required=True)
    a.add_argument("--flops", required=True, help="flops CSV from the flops subcommand")
    a.add_argument("--out", required=True)
    a.add_argument("--extract-budget", dest="extract_budget", type=float, default=None)

    f = sub.add_parser("flops", help="print the control-branch FLOPs table as CSV")
    f.add_argument("--config", required=False, help="train config JSON")

    sub.add_parser("selftest", help="run the invariant quick-suite")
    return p


def _effective_seed(args, fallback: int = 0) -> int:
    env = os.environ.get("FLEXCTL_SEED")
    if env is not None:
        return int(env)
    for value in (getattr(args, "seed", None), getattr(args, "global_seed", None)):
        if value is not None:
            return value
    return fallback


def _load_config(args) -> dict:
    path = getattr(args, "config", None) or args.global_config
    if path is None:
        raise ValueError("a --config JSON file is required")
    return json.loads(Path(path).read_text())


def cmd_train(args) -> int:
    from .trainer import TrainConfig, pretrain_backbone, train

    raw = _load_config(args)
    if os.environ.get("FLEXCTL_SEED") is not None or args.global_seed is not None:
        raw["seed"] = _effective_seed(args, raw.get("seed", 0))
    cfg = TrainConfig.from_dict(raw)
    log = print if args.verbose else None
    backbone = None
    if args.resume is None and not Path(cfg.backbone_ckpt).exists():
        if log:
            log(f"pretraining backbone -> {cfg.backbone_ckpt}")
        backbone, _ = pretrain_backbone(cfg)
    state = train(cfg, backbone=backbone, resume=args.resume, log=log)
    print(f"trained {state.step} steps -> {cfg.output_ckpt}")
    return 0


def cmd_sample(args) -> int:
    from .sampler import SampleConfig, sample

    cfg = SampleConfig(ckpt=args.ckpt, steps=args.steps, sampler=args.sampler,
                       seed=_effective_seed(args, 0), class_id=args.class_id,
                       cond_path=args.cond, out_dir=args.out,
                       force_mask_path=args.force_mask)
    img, log = sample(cfg)
    print(f"wrote {Path(args.out) / 'sample.ppm'} and {Path(args.out) / 'log.csv'} "
          f"({len(log)} log rows)")
    return 0


def cmd_analyze(args) -> int:
    from .analyzer import aggregate, export, read_flops_csv
    from .sampler import ActivationLog

    log = ActivationLog.read_csv(args.log)
    table = read_flops_csv(args.flops)
    matrix = aggregate(log)
    paths = export(matrix, args.out, table=table, extract_budget=args.extract_budget)
    print(f"wrote {', '.join(str(v) for v in paths.values())}")
    return 0


def cmd_flops(args) -> int:
    from .analyzer import write_flops_csv
    from .control import init_from_backbone
    from .trainer import TrainConfig, backbone_config, build_backbone_for

    cfg = TrainConfig.from_dict(_load_config(args))
    bb = build_backbone_for(cfg.backbone_kind, backbone_config(cfg.backbone_kind, cfg.backbone_overrides),
                            cfg.seed)
    bb.freeze()
    branch = init_from_backbone(bb, cfg.mode, np.random.default_rng(cfg.seed))
    write_flops_csv(branch.flops_table, sys.stdout)
    return 0


def cmd_selftest(args) -> int:
    seed = _effective_seed(args, 0)
    checks = []

    def check(name, fn):
        try:
            fn()
            checks.append((name, True, ""))
        except Exception as e:  # report, do not abort the suite
            checks.append((name, False, str(e)))

    def zero_init_identity():
        from .backbone import Conditioning, TinyDiT, TinyDiTConfig, TinyUNet, TinyUNetConfig
        from .control import composed_forward, init_from_backbone
        from .tensor import no_grad

        rng = np.random.default_rng(seed)
        for kind, net in (("unet", TinyUNet(TinyUNetConfig(stage_channels=(8, 16), time_embed_dim=32), np.random.default_rng(seed + 1))),
                          ("dit", TinyDiT(TinyDiTConfig(depth=2), np.random.default_rng(seed + 2)))):
            net.freeze()
            branch = init_from_backbone(net, "flex", np.random.default_rng(seed + 3))
            x = rng.standard_normal((1, 3, 16, 16)).astype(np.float32)
            cond = Conditioning(class_id=np.array([2]), t=np.array([7]) if kind == "unet" else np.array([0.3]),
                                spatial=rng.random((1, 1, 16, 16)).astype(np.float32))
            with no_grad():
                pred, _ = composed_forward(net, branch, x, cond, "infer")
                ref = net.forward(x, cond)
            if not np.array_equal(pred.numpy(), ref.numpy()):
                raise AssertionError(f"{kind} init identity broken")

    def gradient_spot_check():
        from .tensor import Tensor, grad

        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 2, 5, 5))
        w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.3, requires_grad=True)
        loss = Tensor(x).conv2d(w, 1, 1).silu().mean()
        (g,) = grad(loss, [w])
        eps = 1e-5
        flat = w.data.reshape(-1)
        i = 7
        orig = flat[i]
        flat[i] = orig + eps
        hi = Tensor(x).conv2d(Tensor(w.data), 1, 1).silu().mean().item()
        flat[i] = orig - eps
        lo = Tensor(x).conv2d(Tensor(w.data), 1, 1).silu().mean().item()
        flat[i] = orig
        fd = (hi - lo) / (2 * eps)
        if abs(fd - g.reshape(-1)[i]) > 1e-6 * max(1.0, abs(fd)):
            raise AssertionError(f"gradient mismatch: analytic {g.reshape(-1)[i]} vs fd {fd}")

    def threshold_boundary():
        from .router import threshold_mask

        assert threshold_mask(0.7, 0.5) == 1.0
        assert threshold_mask(0.5, 0.5) == 0.0
        assert threshold_mask(0.49999, 0.5) == 0.0

    def seeded_determinism():
        from .backbone import Conditioning, TinyUNet, TinyUNetConfig
        from .tensor import no_grad

        outs = []
        for _ in range(2):
            net = TinyUNet(TinyUNetConfig(stage_channels=(8, 16), time_embed_dim=32),
                           np.random.default_rng(seed + 9))
            rng = np.random.default_rng(seed)
            x = rng.standard_normal((1, 3, 16, 16)).astype(np.float32)
            cond = Conditioning(class_id=np.array([1]), t=np.array([5]), spatial=None)
            with no_grad():
                outs.append(net.forward(x, cond).numpy())
        if not np.array_equal(outs[0], outs[1]):
            raise AssertionError("seeded runs disagree")

    check("zero-init identity", zero_init_identity)
    check("gradient spot check", gradient_spot_check)
    check("threshold boundary", threshold_boundary)
    check("seeded determinism", seeded_determinism)

    failed = False
    for name, ok, msg in checks:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {msg}" if msg else ""))
        failed = failed or not ok
    return 2 if failed else 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("flexctl: error: a subcommand is required", file=sys.stderr)
        return 1
    handlers = {
        "train": cmd_train,
        "sample": cmd_sample,
        "analyze": cmd_analyze,
        "flops": cmd_flops,
        "selftest": cmd_selftest,
    }
    try:
        return handlers[args.command](args)
    except SystemExit:
        raise
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"flexctl: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
