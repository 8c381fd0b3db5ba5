"""Train briefly, export a balanced table of projected embeddings, read it back.

The CSV is the raw material for any 2-D visualization of the embedding
space; here we settle for cosine statistics per class, which already show
whether classes form tight, separated clusters.
"""

import csv
import logging

import numpy as np

from mscontrast.config import config_from_dict
from mscontrast.training import export_embeddings, train

logging.basicConfig(level=logging.WARNING)

cfg = config_from_dict({
    "steps": 100, "batch_size": 4, "eval_interval": 100, "seed": 0,
    "out_dir": "runs/demo_export",
    "dataset": {"n_train": 48, "n_eval": 16},
    "model": {"d": 32},
    "loss": {"a_max": 256},
})
_, _, ckpt = train(cfg)

out = "runs/demo_export/embeddings_s4.csv"
rows = export_embeddings(ckpt, cfg, scale=4, n_per_class=40, out_path=out)
print(f"wrote {rows} rows to {out}")

by_class = {}
with open(out) as f:
    for rec in csv.DictReader(f):
        vec = np.array([float(rec[k]) for k in rec if k.startswith("e")])
        by_class.setdefault(int(rec["class_id"]), []).append(vec)

print(f"classes present: {sorted(by_class)}, {len(next(iter(by_class.values())))} rows each")
means = {c: np.mean(v, axis=0) for c, v in by_class.items()}
for c in sorted(by_class):
    z = np.stack(by_class[c])
    centroid = means[c] / np.linalg.norm(means[c])
    within = float(np.mean(z @ centroid))
    others = [float(centroid @ (means[o] / np.linalg.norm(means[o])))
              for o in sorted(by_class) if o != c]
    print(f"class {c}: mean cos to own centroid {within:+.3f}, "
          f"to other centroids {np.mean(others):+.3f}")
