"""Run the synthetic benchmark: learner comparison, QP iteration sweep, meta-training shot sweep.

    python scripts/run_benchmark.py --out runs/benchmark [--config configs/benchmark.yaml]

Prints each resulting sweep.csv. Takes about twenty minutes on one core.
"""
import argparse
import sys
from pathlib import Path

from fewshot_qp import cli


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(Path(__file__).resolve().parents[1]
                                            / "configs" / "benchmark.yaml"))
    ap.add_argument("--out", default="runs/benchmark")
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args(argv)
    out = Path(args.out)
    common = ["--config", args.config, "-q"] + ([] if args.seed is None else ["--seed", str(args.seed)])
    steps = [
        ("compare", ["compare-learners"]),
        ("qp_iters", ["sweep-qp-iters", "--checkpoint", str(out / "compare" / "svm_cs" / "checkpoint.json")]),
        ("shots", ["sweep-shot", "--set", "eval.shots=[1]"]),
    ]
    for name, argv_ in steps:
        code = cli.main([*argv_, *common, "--out", str(out / name)])
        if code:
            return code
        print(f"== {name}")
        print((out / name / "sweep.csv").read_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
