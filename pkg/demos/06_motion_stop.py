"""Recurrent memory across motion stops.

Trains a small recurrent variant (ConvLSTM after the context module and in
the decoder) on sequence windows that include repeated frames, then feeds
moving pairs followed by identical pairs. The recurrent model keeps
predicting the object from memory; the stateless control collapses as soon
as the correlation signal vanishes.

Run:  python demos/06_motion_stop.py   (several minutes on CPU)
"""
import tempfile

from distinctnet.evalkit import motion_stop_control, motion_stop_experiment
from distinctnet.net import NetConfig, build_distinctnet
from distinctnet.selfsup import TrainConfig, train_stage1
from distinctnet.synthgen import GenConfig, build_stage1_dataset, gen_stage1_sequence, read_dataset

gen = GenConfig(height=48, width=64, frames_per_seq=6,
                sprite_frac=(0.40, 0.60), max_rotation_deg=8.0)
net = NetConfig(input_h=48, input_w=64)

with tempfile.TemporaryDirectory() as data_dir:
    build_stage1_dataset(0, 24, gen, data_dir)
    records = read_dataset(data_dir)

    print("training recurrent variant (ConvLSTM memory) ...")
    recurrent = build_distinctnet(NetConfig(input_h=48, input_w=64,
                                            recurrent=True), seed=0)
    cfg = TrainConfig(stage=1, epochs=6, pairs_per_sequence=4,
                      bptt_len=3, static_prob=0.4, seed=0)
    recurrent, _ = train_stage1(records, cfg, recurrent)

    print("training stateless control ...")
    control = build_distinctnet(net, seed=0)
    control, _ = train_stage1(records, TrainConfig(stage=1, epochs=4), control)

    probe = [gen_stage1_sequence(900 + k, gen) for k in range(3)]
    curve_r = motion_stop_experiment(recurrent, probe, n_move=6, n_static=5,
                                     repeats=3)
    curve_c = motion_stop_control(control, probe, n_move=6, n_static=5,
                                  repeats=3)
    print("\nrelative foreground IoU after the motion stop (t=0 is the last "
          "moving pair):")
    print("  t   recurrent   stateless")
    for (t, mr, _), (_, mc, _) in zip(curve_r, curve_c):
        print(f"  {t}   {mr:9.3f}   {mc:9.3f}")
