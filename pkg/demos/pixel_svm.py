"""Linear one-vs-rest SVM on downsampled raw pixels of the synthetic corpus.

Writes FVS1 feature files, then runs the train-svm / eval-svm commands on them.
Raw pixels are a weak representation here, which is the point: the corpus is
built so that a linear model on pixels stays well below the CNN.

Usage: python demos/pixel_svm.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from xraynet import cli
from xraynet.augment import resize_bilinear
from xraynet.data import FeatureSet, write_feature_set
from xraynet.synth import synthetic_arrays

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_svm")
out.mkdir(parents=True, exist_ok=True)

x, y = synthetic_arrays(8, 40, seed=0)
feats = np.stack([resize_bilinear(im[0], (64, 64)).ravel() for im in x])
test = np.arange(len(y)) % 5 == 0
write_feature_set(out / "train.fvs", FeatureSet(feats[~test], y[~test]))
write_feature_set(out / "test.fvs", FeatureSet(feats[test], y[test]))

argv = ["train-svm", str(out / "train.fvs"), "--test-features", str(out / "test.fvs"),
        "--set", "svm.grid = 0.01, 0.1, 1, 10", "--out-dir", str(out / "svm")]
print("$ xraynet " + " ".join(argv))
sys.exit(cli.main(argv) or cli.main(["eval-svm", str(out / "svm" / "svm.model"), str(out / "test.fvs")]))
