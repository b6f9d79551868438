"""Render a small synthetic corpus, split it and train a reduced CNN for a few epochs.

Usage: python demos/synthetic_cnn.py [out_dir]
"""
import sys
from pathlib import Path

from xraynet import cli

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")

steps = [
    ["synth-data", "--classes", "6", "--per-class", "30", "--seed", "0", "--out-dir", str(out / "raw")],
    ["prepare", str(out / "raw" / "manifest.csv"), "--min-count", "20", "--out-dir", str(out / "prep")],
    # 64x64 inputs and a shallower stack keep this to a minute or two on a laptop
    ["train-cnn", str(out / "prep" / "manifest_split.csv"), "--out-dir", str(out / "cnn"),
     "--set", "model.input_shape = 1, 64, 64",
     "--set", "model.layers = conv:16+bn conv:16+bn pool+drop0.25 conv:32+bn pool+drop0.25 "
              "dense:64+bn+drop0.5 softmax:6",
     "--set", "model.num_classes = 6",
     "--set", "augment.crop_to = 60, 60",
     "--set", "train.epochs = 8", "--set", "train.batch_size = 16", "--set", "train.lr0 = 0.02"],
    ["eval-cnn", str(out / "cnn" / "best.ckpt"), str(out / "prep" / "manifest_split.csv")],
]
for argv in steps:
    print("$ xraynet " + " ".join(argv))
    code = cli.main(argv)
    if code:
        sys.exit(code)
print((out / "cnn" / "history.csv").read_text())
