"""Overfit the moving-foreground stage on a small fixed scene set.

Trains the default 64x96 model for 200 optimizer steps on five scenes and
reports the foreground IoU on the training split: this is the fastest way
to see the whole forward/backward/optimizer stack converge.

Run:  python demos/04_train_moving_foreground.py   (about a minute on CPU)
"""
import tempfile

from distinctnet.evalkit import evaluate
from distinctnet.net import NetConfig, build_distinctnet
from distinctnet.selfsup import TrainConfig, train_stage1
from distinctnet.synthgen import GenConfig, build_stage1_dataset, read_dataset

gen = GenConfig(frames_per_seq=5, sprite_frac=(0.45, 0.65),
                max_rotation_deg=6.0, max_shift=12, bg_clutter=False,
                sprite_kinds=("ellipse", "blob", "polygon"))

with tempfile.TemporaryDirectory() as data_dir:
    build_stage1_dataset(1, 5, gen, data_dir)      # 5 x C(5,2) = 50 pairs
    records = read_dataset(data_dir)

    model = build_distinctnet(NetConfig(), seed=0)
    cfg = TrainConfig(stage=1, epochs=100, max_steps=200,
                      pairs_per_sequence=10, seed=0, static_pair_prob=0.0)
    model, log = train_stage1(records, cfg, model)

    losses = log.losses()
    print(f"steps: {len(losses)}, loss {losses[0]:.3f} -> {losses[-1]:.4f}")
    report = evaluate(model, records, ("background", "foreground"))
    for cls, value in report.per_class_iou.items():
        print(f"  train {cls} IoU: {value:.4f}")
