"""Command-line entry point.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import datapipe as dp
from .config import ConfigError, RunConfig, documented_defaults
from .evalens import (
    EnsembleReport,
    IncompatiblePredictions,
    PredictionSet,
    average_predictions,
    dataset_accuracy,
)
from .model import CheckpointError, ModelConfig, embed_and_init, init_params, load_checkpoint, predict_probs
from .trainer import TrainingDiverged, train

log = logging.getLogger("updown_vqa")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# shared helpers


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: RunConfig, out: Path) -> None:
    (out / "config.txt").write_text(cfg.render())


def _require(cfg: RunConfig, key: str, flag: str | None = None) -> str:
    value = cfg[key]
    if not value:
        hint = f" (or {flag})" if flag else ""
        raise UsageError(f"config key {key}{hint} must be set")
    return value


def _load_records(path, cfg: RunConfig) -> list[dp.QARecord]:
    return dp.prepare_records(dp.read_jsonl(path), cfg["replicate"], cfg["dialog_flatten"])


def _load_features(features_dir, records, with_grid: bool) -> dict[int, dp.ImageFeatures]:
    feats = {}
    for r in records:
        if r.image_id not in feats:
            feats[r.image_id] = dp.load_image_features(features_dir, r.image_id, with_grid)
    return feats


def _encode_all(records, feats, vocab, space, proposal_mode) -> list[dp.VqaExample]:
    return [dp.encode_example(r, feats[r.image_id], vocab, space, proposal_mode) for r in records]


def _predict(params, config, examples, fingerprint, batch_size=256) -> PredictionSet:
    preds = {}
    for i in range(0, len(examples), batch_size):
        batch = dp.collate(examples[i:i + batch_size])
        for qid, p in zip(batch.question_ids, predict_probs(batch, params, config)):
            if qid in preds:
                raise ValueError(f"duplicate question_id {qid} in data")
            preds[qid] = p
    return PredictionSet(fingerprint, preds)


def _read_answers(path) -> dp.AnswerSpace:
    return dp.AnswerSpace([ln for ln in Path(path).read_text(encoding="utf-8").split("\n") if ln])


def _annotations(records) -> dict[int, tuple[str, ...]]:
    return {r.question_id: r.answers for r in records}


def _mirror_sources(cfg: RunConfig, records) -> tuple[str, ...]:
    return tuple(sorted({r.source for r in records})) if cfg["mirror_all_sources"] else ("vqa",)


def _answer_space_from(args) -> dp.AnswerSpace:
    if args.answers:
        return _read_answers(args.answers)
    if args.checkpoint:
        _, _, header = load_checkpoint(args.checkpoint)
        return dp.AnswerSpace(header["answers"])
    raise UsageError("need --answers or --checkpoint to define the answer space")


# --------------------------------------------------------------------------
# commands


def _validation_scorer(cfg, features_dir, config, vocab, space):
    records = _load_records(cfg["val_data"], cfg)
    feats = _load_features(features_dir, records, cfg["use_grid"])
    examples = _encode_all(records, feats, vocab, space, cfg["proposal_mode"])
    annotations = _annotations(records)

    def score(params) -> float:
        return dataset_accuracy(_predict(params, config, examples, space.fingerprint), annotations, space)

    return score


def cmd_train(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    _echo_config(cfg, out)
    records = _load_records(_require(cfg, "train_data"), cfg)
    features_dir = _require(cfg, "features_dir")
    feats = _load_features(features_dir, records, cfg["use_grid"])
    space = dp.AnswerSpace.from_records(records, cfg["num_answers"])
    vocab = dp.Vocabulary.from_records(records)
    if cfg["mirror"]:
        records, feats = dp.augment_mirror(records, feats, _mirror_sources(cfg, records))
    examples = _encode_all(records, feats, vocab, space, cfg["proposal_mode"])

    first = next(iter(feats.values()))
    config = ModelConfig(
        vocab_size=len(vocab), num_answers=len(space), embed_dim=cfg["embed_dim"],
        gru_hidden=cfg["gru_hidden"], fusion_hidden=cfg["fusion_hidden"],
        region_feat_dim=first.regions.shape[1],
        grid_feat_dim=first.grid.shape[-1] if cfg["use_grid"] else 0,
        num_attention_glimpses=cfg["num_attention_glimpses"],
        use_feature_adapter=cfg["use_feature_adapter"], use_boxes=cfg["use_boxes"],
    )
    rng = np.random.default_rng([cfg["seed"], 0])
    embedding = None
    if cfg["embeddings"]:
        table = dp.load_embedding_table(cfg["embeddings"])
        embedding = embed_and_init(vocab.tokens, table, cfg["embed_dim"], rng)
    params = init_params(config, rng, embedding)

    val_eval = None
    if cfg["val_data"] and cfg["eval_every"]:
        val_eval = _validation_scorer(cfg, features_dir, config, vocab, space)

    (out / "answers.txt").write_text("".join(a + "\n" for a in space.answers), encoding="utf-8")
    extra = {"answers": list(space.answers), "vocab": vocab.tokens, "proposal_mode": cfg["proposal_mode"],
             "use_grid": cfg["use_grid"]}
    run = cfg.train_run(str(out / "model.ckpt"), str(out / "metrics.tsv"))
    result = train(run, config, examples, dp.collate, params=params, evaluate=val_eval,
                   checkpoint_extra=extra)
    final = result.log[-1]
    print(f"trained {run.schedule.stop_iter} iterations, final loss {final.loss:.6f}")
    return 0


def cmd_predict(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    _echo_config(cfg, out)
    params, config, header = load_checkpoint(args.checkpoint)
    space = dp.AnswerSpace(header["answers"])
    vocab = dp.Vocabulary(header["vocab"][2:])
    records = _load_records(args.data, cfg)
    feats = _load_features(_require(cfg, "features_dir", "--features"), records, header.get("use_grid", False))
    for image_id, f in feats.items():
        if f.regions.shape[1] != config.region_feat_dim:
            raise ValueError(f"image_id {image_id}: feature width {f.regions.shape[1]} "
                             f"!= checkpoint width {config.region_feat_dim}")
    examples = _encode_all(records, feats, vocab, space, header.get("proposal_mode", cfg["proposal_mode"]))
    preds = _predict(params, config, examples, space.fingerprint)
    preds.save(out / "predictions.json")
    print(f"wrote {len(preds.predictions)} predictions")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    preds = PredictionSet.load(args.predictions)
    space = _answer_space_from(args)
    records = _load_records(args.data, cfg)
    acc = dataset_accuracy(preds, _annotations(records), space)
    print(f"accuracy {acc!r}")
    if args.out:
        out = _out_dir(args)
        _echo_config(cfg, out)
        (out / "eval.json").write_text(json.dumps({"accuracy": acc, "questions": len(records)}))
    return 0


def cmd_ensemble(args, cfg: RunConfig) -> int:
    files = args.predictions or [p for p in cfg["ensemble_members"].split(",") if p]
    if not files:
        raise UsageError("no prediction files given")
    out = _out_dir(args)
    _echo_config(cfg, out)
    sets = [PredictionSet.load(f) for f in files]
    target = out / "predictions.json"
    if len(sets) == 1:
        shutil.copyfile(files[0], target)
    else:
        average_predictions(sets, cfg["ensemble_average"]).save(target)
    print(f"averaged {len(sets)} prediction sets")
    return 0


def _prefix_accuracy(job):
    k, files, mode, annotations, answers = job
    sets = [PredictionSet.load(f) for f in files[:k]]
    return dataset_accuracy(average_predictions(sets, mode), annotations, dp.AnswerSpace(answers))


def cmd_curve(args, cfg: RunConfig) -> int:
    files = args.predictions or [p for p in cfg["ensemble_members"].split(",") if p]
    if len(files) < 2:
        raise UsageError("an ensemble curve needs at least two prediction files")
    out = _out_dir(args)
    _echo_config(cfg, out)
    space = _answer_space_from(args)
    annotations = _annotations(_load_records(args.data, cfg))
    jobs = [(k, files, cfg["ensemble_average"], annotations, space.answers) for k in range(1, len(files) + 1)]
    threads = args.threads or cfg["threads"]
    if threads > 1:
        with ProcessPoolExecutor(threads) as pool:
            accs = list(pool.map(_prefix_accuracy, jobs))
    else:
        accs = [_prefix_accuracy(j) for j in jobs]
    report = EnsembleReport(cfg["ensemble_strategy"], [j[0] for j in jobs], accs, list(files))
    (out / "curve.json").write_text(report.to_json())
    (out / "curve.tsv").write_text(report.table())
    sys.stdout.write(report.table())
    return 0


def cmd_augment(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    _echo_config(cfg, out)
    records = _load_records(args.data, cfg)
    feats = None
    if cfg["mirror"]:
        sources = _mirror_sources(cfg, records)
        if cfg["features_dir"]:
            feats = _load_features(cfg["features_dir"], records, cfg["use_grid"])
        n_before = len(records)
        records, mirrored = dp.augment_mirror(records, feats, sources)
        if feats is not None:
            fdir = out / "features"
            fdir.mkdir(exist_ok=True)
            for r in records[n_before:]:
                dp.save_image_features(fdir, r.image_id, mirrored[r.image_id])
    dp.write_jsonl(out / "records.jsonl", records)
    print(f"wrote {len(records)} records")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .gradcheck import TOLERANCE, run_suite

    seeds = [args.seed] if args.seed is not None else range(20)
    results = run_suite(seeds)
    worst = max(results, key=lambda r: r.max_error)
    for r in results:
        log.info("seed %d grid %d adapter %d: %.3e (%s)", r.seed, r.grid, r.adapter, r.max_error, r.worst_param)
    print(f"max relative error {worst.max_error:.3e} "
          f"(seed {worst.seed}, grid {int(worst.grid)}, adapter {int(worst.adapter)}, {worst.worst_param})")
    if worst.max_error > TOLERANCE:
        print(f"gradient check failed: tolerance {TOLERANCE:g}", file=sys.stderr)
        return 1
    return 0


def cmd_synth(args, cfg: RunConfig) -> int:
    """Write the synthetic task as JSON-lines records plus PYF1 feature files."""
    out = _out_dir(args)
    _echo_config(cfg, out)
    spec = dp.SynthSpec(n_train=args.n_train, n_val=args.n_val, feature_variant=args.variant)
    ds = dp.synth_task(cfg["seed"], spec)
    dp.write_jsonl(out / "train.jsonl", ds.train)
    dp.write_jsonl(out / "val.jsonl", ds.val)
    fdir = out / "features"
    fdir.mkdir(exist_ok=True)
    for image_id, f in ds.features.items():
        dp.save_image_features(fdir, image_id, f)
    print(f"wrote {len(ds.train)} train and {len(ds.val)} val questions")
    return 0


def cmd_defaults(args, cfg: RunConfig) -> int:
    sys.stdout.write(documented_defaults())
    return 0


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="overrides the seed key")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker processes (curve)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="updown-vqa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train a model")

    p = sub.add_parser("predict", parents=[common], help="write a prediction file")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--features", help="feature directory (overrides features_dir)")

    p = sub.add_parser("eval", parents=[common], help="soft accuracy of a prediction file")
    p.add_argument("predictions")
    p.add_argument("data")
    p.add_argument("--answers", help="answers.txt defining the answer space")
    p.add_argument("--checkpoint", help="take the answer space from a checkpoint")

    p = sub.add_parser("ensemble", parents=[common], help="average prediction files")
    p.add_argument("predictions", nargs="*")

    p = sub.add_parser("curve", parents=[common], help="accuracy against ensemble size")
    p.add_argument("data")
    p.add_argument("predictions", nargs="*")
    p.add_argument("--answers")
    p.add_argument("--checkpoint")

    p = sub.add_parser("augment", parents=[common], help="apply record augmentation and write JSON lines")
    p.add_argument("data")

    sub.add_parser("gradcheck", parents=[common], help="end-to-end gradient check")

    p = sub.add_parser("synth", parents=[common], help="write the synthetic task to disk")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-val", type=int, default=200)
    p.add_argument("--variant", default="A", choices=("A", "B"))

    sub.add_parser("defaults", parents=[common], help="print the documented default config")
    return parser


COMMANDS = {
    "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval, "ensemble": cmd_ensemble,
    "curve": cmd_curve, "augment": cmd_augment, "gradcheck": cmd_gradcheck, "synth": cmd_synth,
    "defaults": cmd_defaults,
}


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.defaults()
    cfg = cfg.with_overrides(args.set)
    if args.seed is not None:
        cfg = cfg.with_overrides([f"seed={args.seed}"])
    if args.threads is not None:
        cfg = cfg.with_overrides([f"threads={args.threads}"])
    if getattr(args, "features", None):
        cfg = cfg.with_overrides([f"features_dir={args.features}"])
    cfg.schedule()  # validate early
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, TrainingDiverged, IncompatiblePredictions, CheckpointError, dp.FeatureFileError,
            ValueError, KeyError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
