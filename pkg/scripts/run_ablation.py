"""Both ablation axes on the desk-scale setup, followed by CSV/SVG rendering.

    python scripts/run_ablation.py --out results/ablation [--seed 0]

The pairs axis needs at least four other training videos, which the default
synthetic split provides.
"""

import argparse
import logging
from pathlib import Path

from stswincl import experiments, report, train
from stswincl.experiments import OrderingProtocol


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/ablation")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--axis", choices=("clip-length", "pairs"), action="append")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = OrderingProtocol().experiment(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.json")
    dataset = experiments.prepare_dataset(cfg, out)
    for axis in args.axis or ("clip-length", "pairs"):
        rows = experiments.ablate(cfg, dataset, axis,
                                  log=train.json_log_writer(out / f"ablation_{axis}_log.jsonl"))
        experiments.write_ablation(rows, out / f"ablation_{axis}.csv")
        for r in rows:
            print(f"{axis:>11} {r['setting']!s:>6}  mIoU {r['mIoU']:.4f}  p {r['p_value']:.4g}")
    for p in report.render(out):
        print(f"wrote {p}")


if __name__ == "__main__":
    main()
