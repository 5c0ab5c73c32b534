"""
Training a small keyword spotter
================================

Builds a synthetic corpus with two keywords, trains a narrow lambda
ResNet for a few epochs and prints the test ROC summary.  The real
dataset uses the same layout.  Point ``build_manifest`` at it instead.
"""

import logging
import tempfile
from pathlib import Path

from lambdakws import model as M
from lambdakws import train as TR
from lambdakws.dataset import build_manifest
from lambdakws.synth import make_corpus

logging.basicConfig(level=logging.ERROR)

with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp) / "corpus"
    make_corpus(root, clips_per_word=60, words=("yes", "no", "up", "down"), seed=3)
    manifest = build_manifest(root, ("yes", "no", "up", "down"))
    print("clips per split:", {s: len(manifest.split(s)) for s in ("train", "validation", "test")})

    spec = M.ModelSpec(stem_channels=8, stage_channels=(8, 12, 16, 20), blocks_per_stage=1, d_k=8,
                       num_classes=len(manifest.classes))
    print("parameters:", M.count_params(spec))
    config = TR.TrainConfig(batch_size=16, max_epochs=15, lr0=0.05, augment=False)
    result = TR.train(config, manifest, Path(tmp) / "run", spec=spec,
                      progress=lambda r: print(f"epoch {r['epoch']:2d}  train {r['train_loss']:.3f}  "
                                               f"val acc {r['val_acc']:.3f}"))

print(f"best epoch {result.best_epoch}, test accuracy {result.test.accuracy:.3f}, AUC {result.test.roc.auc:.3f}")
print("confusion (rows = truth):")
print(result.test.confusion)
