"""Train every model/representation pair on the synthetic suite and print a results table.

    python scripts/run_ablation.py --seeds 0 1 2 --steps 500
    python scripts/run_ablation.py --pairs rgb:- s2d:B2 d2s:P+N --blur-ramp 0.8
"""
import argparse
import time

import numpy as np

from evseg.experiment import SuiteConfig, TrainConfig, make_suite, run
from evseg.report import ResultRow, report

DEFAULT_PAIRS = ["rgb:-", "event:B1", "event:B2", "event:B18", "s2d:B1", "s2d:B2", "s2d:B18",
                 "d2s:P", "d2s:P+N"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", nargs="*", default=DEFAULT_PAIRS, help="model:repr, '-' for none")
    ap.add_argument("--seeds", nargs="*", type=int, default=[0])
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--num-train", type=int, default=200)
    ap.add_argument("--num-test", type=int, default=50)
    ap.add_argument("--blur-ramp", type=float, default=0.0)
    ap.add_argument("--csv", help="also write the table as CSV")
    args = ap.parse_args()

    suite_cfg = SuiteConfig(num_train=args.num_train, num_test=args.num_test,
                            blur_ramp=args.blur_ramp)
    t0 = time.perf_counter()
    suite = make_suite(suite_cfg)
    print(f"suite: {len(suite['train'])} train / {len(suite['test'])} test scenes "
          f"({time.perf_counter() - t0:.1f} s)")

    rows = []
    for pair in args.pairs:
        kind, rep = pair.split(":")
        rep = None if rep == "-" else rep
        res = [run(TrainConfig(kind=kind, repr=rep, seed=s, steps=args.steps), suite)
               for s in args.seeds]
        keys = ("acc", "miou", "fwiou")
        mean = {k: float(np.mean([r.test_metrics[k] for r in res])) for k in keys}
        per = [r.test_metrics["per_class_iou"] for r in res]
        per_mean = [None if any(p[c] is None for p in per) else float(np.mean([p[c] for p in per]))
                    for c in range(len(per[0]))]
        red = np.mean([r.ce_reduction for r in res])
        print(f"{kind:5s} {rep or '-':4s} mIoU {100 * mean['miou']:6.2f}  "
              f"CE reduction {100 * red:5.1f}%  {sum(r.seconds for r in res):6.1f} s")
        rows.append(ResultRow(kind, rep or "-", "test-blur", mean["acc"], mean["miou"],
                              mean["fwiou"], per_mean))
    print()
    print(report(rows).decode())
    if args.csv:
        with open(args.csv, "wb") as fh:
            fh.write(report(rows, format="csv"))


if __name__ == "__main__":
    main()
