"""Run the full desk-scale pipeline on synthetic tiles and print each stage's result line.

    python3 scripts/run_synthetic_pipeline.py --out-dir runs/synth --steps 600
"""

import argparse
import sys
import time
from pathlib import Path

from geosdg import cli


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out-dir", type=Path, default=Path("runs/synth"), help="root directory for all stage outputs")
    ap.add_argument("--n-tiles", type=int, default=400, help="synthetic tiles to generate")
    ap.add_argument("--steps", type=int, default=600, help="pre-training steps")
    ap.add_argument("--batch-size", type=int, default=16, help="pre-training batch size")
    ap.add_argument("--seed", type=int, default=0, help="seed shared by every stage")
    ap.add_argument("--ks", default="5,10,50,100,200", help="k values for the sweep")
    args = ap.parse_args(argv)

    root, seed = args.out_dir, ["--seed", str(args.seed)]
    data, run, emb = root / "data", root / "pretrain", root / "embed"
    stages = [
        ["synth-data", "--n-tiles", str(args.n_tiles), "--label-noise", "0", "--out-dir", str(data)],
        ["pretrain", "--manifest", str(data / "manifest.csv"), "--steps", str(args.steps),
         "--batch-size", str(args.batch_size), "--log-every", "50", "--out-dir", str(run)],
        ["embed", "--manifest", str(data / "manifest.csv"), "--checkpoint", str(run / "checkpoint.gsdg"),
         "--survey", str(data / "survey.csv"), "--task", "both", "--out-dir", str(emb)],
        ["knn-eval", "--embeddings", str(emb / "embeddings.csv"), "--task", "both", "--ks", args.ks,
         "--out-dir", str(root / "knn")],
        ["attn-viz", "--checkpoint", str(run / "checkpoint.gsdg"), "--out-dir", str(root / "attn")],
    ]
    for stage in stages:
        t0 = time.perf_counter()
        code = cli.main(stage + seed)
        print(f"stage={stage[0]} exit={code} seconds={time.perf_counter() - t0:.1f}", file=sys.stderr)
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
