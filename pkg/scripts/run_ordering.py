"""Run the three-seed ordering experiment and write ``ordering.json``.

    python scripts/run_ordering.py --out results/ordering [--seeds 0,1,2]
"""

import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

from stswincl.experiments import OrderingProtocol, run_ordering


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/ordering")
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    protocol = replace(OrderingProtocol(), seeds=tuple(int(s) for s in args.seeds.split(",")))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = run_ordering(protocol, out, log=lambda r: logging.info(json.dumps(r)))
    doc = {"protocol": protocol.to_dict(), **res.to_dict()}
    (out / "ordering.json").write_text(json.dumps(doc, indent=2) + "\n")
    for name, v in res.medians.items():
        print(f"{name:>12}  median test mIoU {v:.4f}")
    for name, ok in res.checks.items():
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
    print(f"{res.seconds / 60:.1f} min")


if __name__ == "__main__":
    main()
