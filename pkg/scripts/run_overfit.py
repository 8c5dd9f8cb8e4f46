"""Overfit the synthetic task at desk scale and report train / val soft accuracy."""
import argparse
import time

from updown_vqa.datapipe import SynthSpec, synth_task
from updown_vqa.evalens import dataset_accuracy
from updown_vqa.experiment import DESK_SCHEDULE, MemberSpec, train_member


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--gen-seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--n-train", type=int, default=200)
    ap.add_argument("--fusion-hidden", type=int, default=64)
    ap.add_argument("--log", help="write the metrics log of the last run here")
    args = ap.parse_args()
    spec = SynthSpec(n_train=args.n_train)
    print("gen_seed\tseed\ttrain_acc\tval_acc\tseconds")
    for g in args.gen_seeds:
        ds = synth_task(g, spec)
        annotations = {r.question_id: r.answers for r in ds.val}
        for s in args.seeds:
            t0 = time.perf_counter()
            run = train_member(g, spec, MemberSpec(seed=s, fusion_hidden=args.fusion_hidden), DESK_SCHEDULE)
            val = dataset_accuracy(run.val_predictions, annotations, ds.answer_space)
            print(f"{g}\t{s}\t{run.train_accuracy:.4f}\t{val / 100:.4f}\t{time.perf_counter() - t0:.1f}",
                  flush=True)
            if args.log:
                with open(args.log, "w") as fh:
                    fh.write(run.result.log_text())


if __name__ == "__main__":
    main()
