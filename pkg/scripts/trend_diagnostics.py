"""Embedding health of the highlighters used to score a trend run.

Usage: python3 scripts/trend_diagnostics.py WORK_DIR OUT_JSONL

For every ``refined_seed{N}.srdf`` in WORK_DIR, embeds 512 training faces with
the boundary highlighter and records how many feature dimensions vary and
their mean spread. A collapsed embedding makes desk-FID values tiny and noisy.
"""

import argparse
import json
import re
from pathlib import Path

from srdiff.data import gen_toy_faces
from srdiff.trainer import Trainer


def main():
    p = argparse.ArgumentParser()
    p.add_argument("work_dir")
    p.add_argument("out")
    args = p.parse_args()
    data = gen_toy_faces(2048, 16, 0)
    rows = []
    for path in sorted(Path(args.work_dir).glob("refined_seed*.srdf")):
        seed = int(re.search(r"seed(\d+)", path.name).group(1))
        feats = Trainer.load(path, data).highlighter.embed(data[:512])
        std = feats.std(axis=0)
        rows.append({"seed": seed, "embed_dims": int(feats.shape[1]), "live_dims": int((std > 1e-6).sum()),
                     "mean_feature_std": float(std.mean())})
    with open(args.out, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
            print(json.dumps(r))


if __name__ == "__main__":
    main()
