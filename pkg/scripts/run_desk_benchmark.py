"""Generate the 2000-sample desk dataset, run 5-fold evaluation, print the pooled metrics.

    python3 scripts/run_desk_benchmark.py [--config configs/desk_benchmark.json] [--out out/desk]
"""
import argparse
import json
import time
from pathlib import Path

from stagedetect.cli import cmd_generate_data, cmd_train
from stagedetect.config import RunConfig

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk_benchmark.json"))
    ap.add_argument("--out", default=None)
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()

    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out or cfg.paths.out_dir)
    cmd_generate_data(cfg, out)
    start = time.perf_counter()
    metrics = cmd_train(cfg, out / "dataset.jsonl", out)
    elapsed = time.perf_counter() - start
    timing = json.loads((out / "timing.json").read_text())

    pooled = metrics["pooled"]
    print(f"samples      {pooled['n_samples']}")
    for name in ("accuracy", "precision", "recall", "f1", "fpr"):
        print(f"{name:<12} {pooled[name]:.4f}")
    print(f"latency      {timing['latency_ms_inclusive']:.3f} ms/sample "
          f"({timing['latency_ms_model_only']:.3f} model-only)")
    print(f"wall time    {elapsed:.1f} s")
    print(f"outputs in   {out}")


if __name__ == "__main__":
    main()
