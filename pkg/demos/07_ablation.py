"""Sweep merge type x placement at miniature scale.

Trains every combination of {correlation, co_attention} x {block1..block4,
aspp} for a couple of epochs on a small scene set and prints the resulting
table: validation mIoU, parameter count and single-pair forward latency.

Run:  python demos/07_ablation.py   (several minutes on CPU)
"""
import tempfile

from distinctnet.evalkit import ablation_sweep
from distinctnet.net import NetConfig, PLACEMENTS
from distinctnet.synthgen import GenConfig, build_stage1_dataset, read_dataset

gen = GenConfig(height=32, width=48, frames_per_seq=4,
                sprite_frac=(0.40, 0.60), max_rotation_deg=8.0)

with tempfile.TemporaryDirectory() as data_dir:
    build_stage1_dataset(0, 20, gen, data_dir)
    records = read_dataset(data_dir)
    base = NetConfig(input_h=32, input_w=48)

    rows = ablation_sweep(base, PLACEMENTS, ("correlation", "co_attention"),
                          records, epochs=2, seed=0)

    print(f"\n{'merge':14s} {'pos':8s} {'mIoU_val':>8s} {'params':>9s} {'ms':>7s}")
    for r in rows:
        print(f"{r['merge']:14s} {r['pos']:8s} {r['miou_val']:8.3f} "
              f"{r['params']:9d} {r['latency_ms']:7.1f}")
    corr = [r for r in rows if r["merge"] == "correlation"]
    fastest = min(corr, key=lambda r: r["latency_ms"])
    print(f"\nfastest correlation placement here: {fastest['pos']}")
