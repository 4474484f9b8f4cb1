#!/usr/bin/env python3
"""Overfit the detector on a handful of synthetic scenes and report the
per-class recall of the trained model on those same scenes."""

import argparse
import os

from densepillars.bev import rotated_iou_bev
from densepillars.config import parse_config
from densepillars.pointcloud import CLASSES
from densepillars.train import make_training_scenes, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=os.path.join(
        os.path.dirname(__file__), "..", "configs", "desk_overfit.cfg"))
    ap.add_argument("--out-dir", default="runs/overfit")
    ap.add_argument("--iou", type=float, default=0.5, help="recall IoU threshold")
    args = ap.parse_args()

    cfg = parse_config(args.config)
    scenes = make_training_scenes(cfg)
    pipeline, history = train(cfg, args.out_dir, scenes=scenes)
    print(f"\nloss {history[0]:.3f} -> {history[-1]:.3f} "
          f"(ratio {history[-1] / history[0]:.4f})")

    pipeline.set_mode("eval")
    found = {c: 0 for c in CLASSES}
    total = {c: 0 for c in CLASSES}
    for scene in scenes:
        dets = pipeline.predict(
            scene.cloud,
            score_thr=cfg["eval.score_threshold"],
            nms_thr=cfg["eval.nms_iou"],
        )
        for box, cls in scene.boxes:
            total[cls] += 1
            if any(d.label == cls and rotated_iou_bev(d.box, box) >= args.iou
                   for d in dets):
                found[cls] += 1
    for cls in CLASSES:
        if total[cls]:
            print(f"{cls:<12} recall {found[cls]}/{total[cls]} "
                  f"= {found[cls] / total[cls]:.2f}")


if __name__ == "__main__":
    main()
