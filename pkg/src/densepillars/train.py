"""Desk-scale overfit training loop plus checkpoint save/load."""

from __future__ import annotations

import math
import os

import numpy as np

from .config import RunConfig
from .model import DetectionPipeline
from .optim import OptimizerState, adamw_step, cosine_lr
from .pointcloud import synth_scene
from .tensor import InvariantViolation

CHECKPOINT_VERSION = 1


def build_pipeline(cfg: RunConfig) -> DetectionPipeline:
    return DetectionPipeline(
        grid=cfg.grid_spec(),
        backbone=cfg["architecture.backbone"],
        growth=cfg.growth_schedule(),
        downsample=cfg["architecture.downsample"],
        seed=cfg["run.seed"],
    )


def save_checkpoint(path, pipeline: DetectionPipeline, opt: OptimizerState,
                    cfg: RunConfig) -> None:
    state = pipeline.state_arrays()
    for k, v in opt.m.items():
        state[f"opt_m/{k}"] = v
    for k, v in opt.v.items():
        state[f"opt_v/{k}"] = v
    state["meta/version"] = np.array(CHECKPOINT_VERSION)
    state["meta/step"] = np.array(opt.t)
    state["meta/config"] = np.frombuffer(cfg.to_json().encode("utf-8"), dtype=np.uint8)
    np.savez(path, **state)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        state = {k: z[k] for k in z.files}
    version = int(state["meta/version"])
    if version != CHECKPOINT_VERSION:
        raise InvariantViolation(f"unsupported checkpoint version {version}")
    cfg = RunConfig.from_json(bytes(state["meta/config"]).decode("utf-8"))
    pipeline = build_pipeline(cfg)
    pipeline.load_state_arrays(state)
    opt = OptimizerState(
        lr=cfg["train.lr"], weight_decay=cfg["train.weight_decay"],
        t=int(state["meta/step"]),
    )
    for k in pipeline.named_params():
        mk, vk = f"opt_m/{k}", f"opt_v/{k}"
        if mk in state:
            opt.m[k] = state[mk].copy()
            opt.v[k] = state[vk].copy()
    return pipeline, opt, cfg


def make_training_scenes(cfg: RunConfig):
    g = cfg.grid_spec()
    base = cfg["run.seed"]
    return [
        synth_scene(
            seed=base * 1000 + i,
            n_boxes=cfg["train.boxes_per_scene"],
            x_range=g.x_range,
            y_range=g.y_range,
        )
        for i in range(cfg["train.num_scenes"])
    ]


def train(cfg: RunConfig, out_dir: str, scenes=None, log=print):
    """Overfit loop: cached pillar batches and targets, AdamW + cosine lr.

    Writes `loss.csv` (step, lr, cls, loc, dir, total) and `checkpoint.npz`
    to out_dir; returns the per-step total-loss history.
    """
    os.makedirs(out_dir, exist_ok=True)
    pipeline = build_pipeline(cfg)
    pipeline.set_mode("train")
    if scenes is None:
        scenes = make_training_scenes(cfg)
    batches = [pipeline.encode(s.cloud, seed=i, cap=True) for i, s in enumerate(scenes)]
    assignments = [pipeline.targets_for(s.boxes) for s in scenes]

    params = pipeline.named_params()
    opt = OptimizerState(lr=cfg["train.lr"], weight_decay=cfg["train.weight_decay"])
    steps = cfg["train.steps"]
    bs = cfg["train.batch_size"]
    history = []
    rows = ["step,lr,cls,loc,dir,total"]
    for step in range(steps):
        lr = cosine_lr(step, steps, cfg["train.lr"], cfg["train.eta_min"])
        opt.lr = lr
        pipeline.zero_grad()
        sums = {"cls": 0.0, "loc": 0.0, "dir": 0.0, "total": 0.0}
        for j in range(bs):
            i = (step * bs + j) % len(scenes)
            losses = pipeline.loss_encoded(batches[i], assignments[i])
            losses["total"].backward(np.array(1.0 / bs, dtype=np.float32))
            for k in sums:
                sums[k] += float(losses[k].data) / bs
        if not math.isfinite(sums["total"]):
            raise InvariantViolation(f"non-finite loss at step {step}: {sums}")
        adamw_step(params, opt)
        history.append(sums["total"])
        rows.append(
            f"{step},{lr:.6g},{sums['cls']:.6g},{sums['loc']:.6g},"
            f"{sums['dir']:.6g},{sums['total']:.6g}"
        )
        if log is not None and (step % 25 == 0 or step == steps - 1):
            log(f"step {step:4d}  lr {lr:.5f}  total {sums['total']:.4f}")

    with open(os.path.join(out_dir, "loss.csv"), "w", encoding="utf-8") as f:
        f.write("\n".join(rows) + "\n")
    save_checkpoint(os.path.join(out_dir, "checkpoint.npz"), pipeline, opt, cfg)
    return pipeline, history
