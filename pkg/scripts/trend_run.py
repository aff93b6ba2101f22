"""Same-seed baseline vs self-refining comparison on 16x16 toy faces.

Usage: python3 scripts/trend_run.py OUT_DIR [--seeds 0 1 2 3 4] [--base-steps 20000]

Writes OUT_DIR/trend.jsonl (one line per training seed, each with its own
sampling seed) and OUT_DIR/sampling.jsonl (the first seed's two checkpoints
scored under several sampling seeds). Seeds already recorded are skipped.
"""

import argparse
import json
import time
from pathlib import Path

from srdiff.data import gen_toy_faces
from srdiff.denoiser import DenoiserConfig
from srdiff.experiments import baseline_vs_refined, generate
from srdiff.metrics import desk_fid
from srdiff.trainer import TrainConfig, Trainer


def recorded(path, key):
    if not path.exists():
        return set()
    return {json.loads(line)[key] for line in path.read_text().splitlines() if line.strip()}


def append(path, row):
    with open(path, "a") as fh:
        fh.write(json.dumps(row) + "\n")
    print(json.dumps(row), flush=True)


def main():
    p = argparse.ArgumentParser()
    p.add_argument("out_dir")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--sampling-seeds", type=int, nargs="+", default=[2024, 2025, 2026, 2027, 2028])
    p.add_argument("--base-steps", type=int, default=20_000)
    p.add_argument("--refine-steps", type=int, default=20_000)
    p.add_argument("--eval-samples", type=int, default=500)
    args = p.parse_args()
    out = Path(args.out_dir)
    work = out / "work"
    work.mkdir(parents=True, exist_ok=True)
    data = gen_toy_faces(2048, 16, 0)
    dcfg = DenoiserConfig(base_channels=8)

    trend = out / "trend.jsonl"
    done = recorded(trend, "seed")
    for seed in args.seeds:
        if seed in done:
            continue
        cfg = TrainConfig(total_steps=args.base_steps + args.refine_steps, base_steps=args.base_steps,
                          cycle=100, lambda_fwd=0.01, lambda_rev=0.025, T=200, seed=seed)
        t0 = time.time()
        row = baseline_vs_refined(cfg, data, dcfg, eval_samples=args.eval_samples, eval_seed=2024 + seed,
                                  work_dir=work)
        row.update(seconds=time.time() - t0, base_steps=args.base_steps, refine_steps=args.refine_steps,
                   eval_seed=2024 + seed, eval_samples=args.eval_samples)
        append(trend, row)

    seed = args.seeds[0]
    sampling = out / "sampling.jsonl"
    done = recorded(sampling, "eval_seed")
    refined = Trainer.load(work / f"refined_seed{seed}.srdf", data)
    baseline = Trainer.load(work / f"baseline_seed{seed}.srdf", data)
    for eval_seed in args.sampling_seeds:
        if eval_seed in done:
            continue
        append(sampling, {
            "seed": seed, "eval_seed": eval_seed,
            "desk_fid_baseline": desk_fid(data, generate(baseline, args.eval_samples, eval_seed), refined.highlighter),
            "desk_fid_refined": desk_fid(data, generate(refined, args.eval_samples, eval_seed), refined.highlighter),
        })


if __name__ == "__main__":
    main()
