"""Shared fixtures: tiny trained artifacts reused across test modules."""

import numpy as np
import pytest

from flexctl.data import generate_synthetic
from flexctl.trainer import TrainConfig, init_train_state, pretrain_backbone, train


def tiny_config(tmp, **overrides) -> TrainConfig:
    base = dict(
        backbone_kind="unet",
        mode="flex",
        gamma=0.5,
        max_steps=24,
        warmup_steps=6,
        batch=4,
        seed=13,
        dataset_size=64,
        pretrain_steps=24,
        backbone_ckpt=str(tmp / "backbone.ckpt"),
        output_ckpt=str(tmp / "control.ckpt"),
        backbone_overrides={"stage_channels": [8, 16], "time_embed_dim": 32},
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A miniature end-to-end run: pretrained backbone + trained flex branch."""
    tmp = tmp_path_factory.mktemp("tiny_run")
    cfg = tiny_config(tmp)
    dataset = generate_synthetic(cfg.seed, cfg.dataset_size)
    backbone, losses = pretrain_backbone(cfg, dataset=dataset)
    state = train(cfg, backbone=backbone, dataset=dataset)
    return {"cfg": cfg, "dataset": dataset, "backbone": backbone,
            "state": state, "pretrain_losses": losses, "tmp": tmp}


@pytest.fixture()
def tiny_state(tiny_run):
    return tiny_run["state"]
