"""The whole self-supervised story in one script, at miniature scale.

Generates moving-sprite data, trains the foreground stage, harvests
gripper paste points with the trained model, composes robot-object data
around those points, fine-tunes semantic heads, and evaluates per-class
IoU on the held-out split. Miniature sizes keep this to a few minutes;
the `distinct pipeline` command runs the same chain at full desk scale.

Run:  python demos/05_full_pipeline.py
"""
import tempfile
from pathlib import Path

from distinctnet.evalkit import evaluate
from distinctnet.net import NetConfig, build_distinctnet, extend_heads
from distinctnet.selfsup import (TrainConfig, extract_paste_point,
                                 finetune_stage2, split_records, train_stage1)
from distinctnet.synthgen import (GenConfig, build_stage1_dataset,
                                  build_stage2_dataset, read_dataset)

gen = GenConfig(frames_per_seq=5, sprite_frac=(0.40, 0.60),
                max_rotation_deg=8.0)

with tempfile.TemporaryDirectory() as root:
    root = Path(root)
    print("1. generating moving-sprite sequences ...")
    build_stage1_dataset(0, 30, gen, root / "stage1")
    stage1 = read_dataset(root / "stage1")

    print("2. training moving-foreground segmentation ...")
    model = build_distinctnet(NetConfig(), seed=0)
    model, log1 = train_stage1(stage1, TrainConfig(stage=1, epochs=4), model)
    print(f"   per-epoch val mIoU: {['%.3f' % v for v in log1.val_mious()]}")

    print("3. harvesting paste points + composing robot-object pairs ...")
    def paste_fn(closed, opened):
        return extract_paste_point(model, closed, opened)
    build_stage2_dataset(1, 60, gen, root / "stage2", paste_point_fn=paste_fn)
    stage2 = read_dataset(root / "stage2")

    print("4. fine-tuning semantic heads (encoder frozen) ...")
    model = extend_heads(model, ("manipulator", "object"), seed=2)
    model, log2 = finetune_stage2(stage2, TrainConfig(stage=2, epochs=4), model)

    print("5. evaluating on the held-out split ...")
    val = split_records(stage2, "val")
    report = evaluate(model, val, ("background", "foreground", "manipulator",
                                   "object"))
    for cls, value in report.per_class_iou.items():
        print(f"   {cls:12s} IoU {value:.3f}")
    print(f"   mIoU {report.miou:.3f}  ({report.param_count} parameters)")
    print("miniature run; the acceptance-scale pipeline trains longer and "
          "reaches much higher IoU")
