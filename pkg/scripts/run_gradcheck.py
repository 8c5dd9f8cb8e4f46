"""End-to-end gradient check over seeds and all grid-path / adapter combinations."""
import argparse
import sys
import time

from updown_vqa.gradcheck import TOLERANCE, run_suite


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    args = ap.parse_args()
    t0 = time.perf_counter()
    results = run_suite(range(args.seeds))
    for r in results:
        print(f"seed={r.seed:2d} grid={int(r.grid)} adapter={int(r.adapter)} "
              f"max_rel_err={r.max_error:.3e} worst={r.worst_param} probes={r.checked}")
    worst = max(r.max_error for r in results)
    print(f"overall max relative error {worst:.3e} (tolerance {TOLERANCE:g}) "
          f"in {time.perf_counter() - t0:.1f}s")
    return 0 if worst <= TOLERANCE else 1


if __name__ == "__main__":
    sys.exit(main())
