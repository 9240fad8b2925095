"""Command-line entry points: data synthesis, featurization, training,
captioning, and evaluation.

Exit codes: 0 success, 1 runtime/validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import decoder as dec
from . import training as tr
from .audiofeat import FeatConfig, load_wav, load_precomputed, mel_features, \
    save_precomputed
from .data import SynthConfig, synth_dataset
from .evalmetrics import METRIC_NAMES, evaluate_manifest
from .report import plot_metric_bars, plot_training_curves


def _seed_override(seed: int) -> int:
    env = os.environ.get("SECAP_SEED")
    if env is None:
        return seed
    try:
        return int(env)
    except ValueError:
        raise SystemExit(f"SECAP_SEED must be an integer, got {env!r}")


def _guard_overwrite(path, force: bool):
    if os.path.exists(path) and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")


def cmd_synth_data(args) -> int:
    cfg = SynthConfig(items_per_category=args.items_per_category,
                      seed=_seed_override(args.seed))
    records = synth_dataset(cfg, args.out, force=args.force)
    print(f"wrote {len(records)} records to {os.path.join(args.out, 'manifest.jsonl')}")
    return 0


def cmd_featurize(args) -> int:
    cfg = FeatConfig(mel_bins=args.mel_bins)
    _guard_overwrite(args.out, args.force)
    feats = mel_features(load_wav(args.input), cfg)
    save_precomputed(args.out, feats)
    print(f"wrote {feats.frames.shape[0]}x{feats.frames.shape[1]} features to {args.out}")
    return 0


def cmd_train(args) -> int:
    if args.config:
        cfg = tr.parse_config_file(args.config)
    else:
        cfg = tr.TrainConfig()
    if args.stage is not None:
        cfg.stage = args.stage
    if args.steps is not None:
        cfg.steps = args.steps
    cfg.seed = _seed_override(cfg.seed)
    if not args.resume:
        _guard_overwrite(os.path.join(args.out, "ckpt_final.ckpt"), args.force)
    _, _, final_path, rows = tr.run_training(
        cfg, args.manifest, args.out,
        init_checkpoint=args.init_checkpoint,
        resume_from=args.resume)
    fig = plot_training_curves(os.path.join(args.out, "metrics.csv"),
                               os.path.join(args.out, "loss_curves.png"))
    print(f"trained {len(rows)} steps; checkpoint {final_path}; curves {fig}")
    return 0


def _load_features_for(path, mel_bins):
    if path.endswith(".wav"):
        return mel_features(load_wav(path), FeatConfig(mel_bins=mel_bins))
    return load_precomputed(path, expected_dim=mel_bins)


def cmd_caption(args) -> int:
    state = tr.load_checkpoint(args.checkpoint)
    cfg, params, vocab = state["config"], state["params"], state["vocab"]
    feats = _load_features_for(args.input, cfg.mel_bins)
    bank = dec.load_prompt_bank(cfg.prompt_bank)
    from . import qformer as qf
    qf_cfg, dec_cfg = tr.model_configs(cfg, vocab)
    q_e = qf.encode_speech(feats, params, qf_cfg)
    l_emb = qf.project(q_e, params).value
    prompt = dec.select_prompt(bank)
    print(dec.generate_greedy(l_emb, vocab.tokenize(prompt), params, dec_cfg,
                              vocab, max_len=cfg.max_caption_len))
    return 0


def _read_caption_file(path) -> dict:
    """Tab-separated `id<TAB>caption` lines; repeated ids accumulate."""
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected id<TAB>caption")
            item_id, _, caption = line.partition("\t")
            out.setdefault(item_id, []).append(caption)
    return out


def cmd_eval(args) -> int:
    preds = _read_caption_file(args.pred)
    multi = [k for k, v in preds.items() if len(v) > 1]
    if multi:
        raise ValueError(f"multiple predictions for id(s): {', '.join(sorted(multi))}")
    refs = _read_caption_file(args.ref)
    report = evaluate_manifest({k: v[0] for k, v in preds.items()}, refs,
                               mode=args.tokenize)
    _guard_overwrite(args.out, args.force)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    fig_path = os.path.splitext(args.out)[0] + ".png"
    plot_metric_bars(report.corpus, fig_path)
    print(" ".join(f"{m}={report.corpus[m]:.4f}" for m in METRIC_NAMES))
    print(f"report {args.out}; figure {fig_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="emocap",
                                description="speech emotion captioning toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="generate the synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--items-per-category", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("featurize", help="log-mel features for one WAV file")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mel-bins", type=int, default=40)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("train", help="run one training stage")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--stage", type=int, choices=(1, 2), default=None)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--init-checkpoint", default=None,
                   help="seed parameters from this checkpoint")
    s.add_argument("--resume", default=None,
                   help="continue an interrupted run from this checkpoint")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("caption", help="caption one recording")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="WAV or feature file")
    s.set_defaults(func=cmd_caption)

    s = sub.add_parser("eval", help="score predictions against references")
    s.add_argument("--pred", required=True, help="id<TAB>caption file")
    s.add_argument("--ref", required=True, help="id<TAB>caption file, repeatable ids")
    s.add_argument("--out", required=True, help="report CSV path")
    s.add_argument("--tokenize", choices=("char", "word"), default="char")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        return args.func(args)
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
