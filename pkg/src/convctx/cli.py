"""Command-line pipeline driver.

Subcommands cover the full workflow: synth-corpus, featurize, train,
grad-check, eval, sensitivity, project, metrics. Every command resolves its
configuration as defaults <- --config JSON <- explicit flags, echoes the
resolved config into the output directory, confines all writes to --out-dir,
and is deterministic given (--config, flags, --seed): rerunning with
identical inputs overwrites outputs with identical bytes.

Split consistency: train, eval, sensitivity, and project re-derive the
train/val/test partition from the corpus, the configured ratios, and the
seed, so downstream commands must be given the same seed and split config as
the training run (the config echo records both).
"""

from __future__ import annotations

import argparse
import copy
import sys
from pathlib import Path

from . import metrics as metrics_mod
from . import prosody, training
from .corpus import SynthConfig, generate_synthetic, load_manifest, split
from .encoder import load_checkpoint, save_checkpoint
from .errors import ConfigError, ConvctxError
from .features import (
    FrameParams,
    compute_frame_track,
    featurize_corpus,
    load_feature_set,
    read_wav,
)
from .sampler import TripletSampler, make_context
from .util import STREAM_EVAL, STREAM_PROJECT, stream_rng, write_csv, write_json

GRAD_TOLERANCE = 1e-4


def default_config() -> dict:
    return {
        "seed": 0,
        "workers": 1,
        "split": {"ratios": [0.7, 0.15, 0.15]},
        "corpus": SynthConfig().to_dict(),
        "features": {**FrameParams().to_dict(), "hash_dim": 1024},
        "loss": training.LossConfig().to_dict(),
        "apm": prosody.ApmConfig().to_dict(),
        "eval": {"n_fakes": 8, "eval_triplets": 600, "n_bootstrap": 1000},
    }


def _deep_merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if key not in merged:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(merged[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {key!r} must be an object")
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def resolve_config(args) -> dict:
    cfg = default_config()
    config_path = getattr(args, "config", None)
    if config_path:
        from .util import read_json

        file_cfg = read_json(config_path)
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{config_path}: config must be a JSON object")
        cfg = _deep_merge(cfg, file_cfg)
    overrides = {
        "seed": ("seed",),
        "workers": ("workers",),
        "strategy": ("loss", "strategy"),
        "margin": ("loss", "margin"),
        "batch_size": ("loss", "batch_size"),
        "steps": ("loss", "steps"),
        "context_max": ("loss", "i_max"),
        "n_fakes": ("eval", "n_fakes"),
    }
    for attr, path in overrides.items():
        value = getattr(args, attr, None)
        if value is not None:
            node = cfg
            for key in path[:-1]:
                node = node[key]
            node[path[-1]] = value
    return cfg


def _echo_config(cfg: dict, args, out_dir: Path, command: str) -> None:
    echo = {
        "command": command,
        "config": cfg,
        "inputs": {
            k: getattr(args, k)
            for k in ("manifest", "features", "checkpoint", "ref", "hyp")
            if getattr(args, k, None) is not None
        },
    }
    write_json(out_dir / "config_echo.json", echo)


def _frame_params(cfg: dict) -> FrameParams:
    feats = {k: v for k, v in cfg["features"].items() if k != "hash_dim"}
    return FrameParams.from_dict(feats)


def _load_split(args, cfg):
    corpus = load_manifest(args.manifest)
    ratios = tuple(cfg["split"]["ratios"])
    return corpus, split(corpus, ratios, cfg["seed"])


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth_corpus(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out_dir)
    synth = SynthConfig.from_dict(cfg["corpus"])
    corpus = generate_synthetic(synth, cfg["seed"], out_dir)
    _echo_config(cfg, args, out_dir, "synth-corpus")
    print(
        f"wrote {len(corpus.conversations)} conversations, {corpus.n_utterances} utterances "
        f"to {out_dir / 'manifest.jsonl'}"
    )
    return 0


def cmd_featurize(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out_dir)
    corpus = load_manifest(args.manifest)
    featurize_corpus(corpus, _frame_params(cfg), cfg["features"]["hash_dim"], out_dir, cfg["workers"])
    _echo_config(cfg, args, out_dir, "featurize")
    print(f"featurized {corpus.n_utterances} utterances into {out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out_dir)
    corpus, (train_c, val_c, test_c) = _load_split(args, cfg)
    features = load_feature_set(args.features)
    loss_cfg = training.LossConfig.from_dict(cfg["loss"])
    report = training.train(train_c, features, loss_cfg, cfg["seed"], out_dir, holdout_corpus=val_c)
    if args.with_apm:
        params_text, params_audio, meta, _ = load_checkpoint(out_dir / report.checkpoint_path)
        apm_cfg = prosody.ApmConfig.from_dict(cfg["apm"])
        apm, apm_report = prosody.train_apm(
            train_c, features, params_text, params_audio, apm_cfg, cfg["seed"], holdout_corpus=val_c
        )
        save_checkpoint(params_text, params_audio, meta, out_dir / report.checkpoint_path, apm=apm)
        write_json(out_dir / "apm_report.json", apm_report)
    _echo_config(cfg, args, out_dir, "train")
    final = report.losses_total[-1] if report.losses_total else float("nan")
    sat = report.satisfaction[-1]["concat"] if report.satisfaction else float("nan")
    print(
        f"trained {loss_cfg.strategy} for {loss_cfg.steps} steps "
        f"(final loss {final:.4f}, held-out satisfaction {sat:.3f}); "
        f"checkpoint at {out_dir / report.checkpoint_path}"
    )
    return 0


def cmd_grad_check(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out_dir)
    # A compact self-contained setup: the sweep touches every parameter of
    # both encoders and the prosody head, so small dims keep it under the
    # one-minute budget without skipping any parameter.
    synth = SynthConfig(
        n_conversations=10,
        utterances_range=(4, 6),
        n_speakers=4,
        n_topics=3,
        vocab_per_topic=40,
        duration_range=(0.3, 0.5),
    )
    corpus_dir = out_dir / "grad_check_corpus"
    corpus = generate_synthetic(synth, cfg["seed"], corpus_dir)
    features = featurize_corpus(corpus, _frame_params(cfg), 128, corpus_dir)
    loss_cfg = training.LossConfig.from_dict({**cfg["loss"], "batch_size": 8})
    enc_result = training.grad_check(corpus, features, loss_cfg, cfg["seed"], eps=args.epsilon)
    params_text, params_audio = training.init_encoder_pair(cfg["seed"], features.hash_dim)
    apm_cfg = prosody.ApmConfig.from_dict({**cfg["apm"], "batch_size": 8})
    apm_result = prosody.grad_check_apm(
        corpus, features, params_text, params_audio, apm_cfg, cfg["seed"], eps=args.epsilon
    )
    report = {
        "encoders": enc_result.to_dict(),
        "prosody_head": apm_result.to_dict(),
        "epsilon": args.epsilon,
        "tolerance": GRAD_TOLERANCE,
    }
    write_json(out_dir / "grad_check.json", report)
    _echo_config(cfg, args, out_dir, "grad-check")
    worst = max(enc_result.max_rel_error, apm_result.max_rel_error)
    print(
        f"max relative error: encoders {enc_result.max_rel_error:.3e} "
        f"({enc_result.n_params} params), prosody head {apm_result.max_rel_error:.3e} "
        f"({apm_result.n_params} params)"
    )
    return 0 if worst < GRAD_TOLERANCE else 1


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out_dir)
    corpus, (train_c, val_c, test_c) = _load_split(args, cfg)
    features = load_feature_set(args.features)
    params_text, params_audio, meta, apm = load_checkpoint(args.checkpoint)
    sampler = TripletSampler(test_c, cfg["loss"]["i_max"])
    triplets = sampler.build_batch(
        cfg["eval"]["eval_triplets"], "S3", stream_rng(cfg["seed"], STREAM_EVAL)
    )
    sat = metrics_mod.triplet_satisfaction(
        triplets, params_text, params_audio, features, cfg["loss"]["margin"]
    )
    report = {"satisfaction": sat.to_dict(), "checkpoint_meta": meta, "split": "test"}
    rows = [("satisfaction_concat", sat.concat), ("satisfaction_text", sat.text), ("satisfaction_audio", sat.audio)]
    if apm is not None:
        apm_cfg = prosody.ApmConfig.from_dict(cfg["apm"])
        real = prosody.eval_apm(
            test_c, features, params_text, params_audio, apm, "real", cfg["seed"], apm_cfg.i_max
        )
        fake = prosody.eval_apm(
            test_c, features, params_text, params_audio, apm, "fake", cfg["seed"], apm_cfg.i_max
        )
        report["apm"] = {"real": real, "fake": fake}
        for dim, name in enumerate(real["dimension_order"]):
            rows.append((f"apm_rmse_{name}_real", real["per_dimension_rmse"][dim]))
            rows.append((f"apm_rmse_{name}_fake", fake["per_dimension_rmse"][dim]))
        rows.append(("apm_mean_rmse_real", real["mean_rmse"]))
        rows.append(("apm_mean_rmse_fake", fake["mean_rmse"]))
    write_json(out_dir / "eval_report.json", {"report": report, "config": cfg})
    write_csv(out_dir / "eval_report.csv", ["metric", "value"], rows)
    _echo_config(cfg, args, out_dir, "eval")
    print(f"test satisfaction: concat={sat.concat:.3f} text={sat.text:.3f} audio={sat.audio:.3f}")
    if apm is not None:
        print(
            f"apm mean RMSE: real={report['apm']['real']['mean_rmse']:.4f} "
            f"fake={report['apm']['fake']['mean_rmse']:.4f}"
        )
    return 0


def cmd_sensitivity(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out_dir)
    corpus, (train_c, val_c, test_c) = _load_split(args, cfg)
    features = load_feature_set(args.features)
    params_text, params_audio, _, _ = load_checkpoint(args.checkpoint)
    report = metrics_mod.context_sensitivity(
        test_c,
        features,
        params_text,
        params_audio,
        n_fakes=cfg["eval"]["n_fakes"],
        seed=cfg["seed"],
        i_max=cfg["loss"]["i_max"],
        n_bootstrap=cfg["eval"]["n_bootstrap"],
    )
    write_json(out_dir / "sensitivity_report.json", {"report": report.to_dict(), "config": cfg})
    _echo_config(cfg, args, out_dir, "sensitivity")
    print(
        f"gap={report.gap:.4f} CI=({report.gap_ci_low:.4f}, {report.gap_ci_high:.4f}) "
        f"nearest-real accuracy={report.nearest_real_accuracy:.3f}"
    )
    return 0


def cmd_project(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out_dir)
    corpus, (train_c, val_c, test_c) = _load_split(args, cfg)
    features = load_feature_set(args.features)
    params_text, params_audio, _, _ = load_checkpoint(args.checkpoint)
    i_max = cfg["loss"]["i_max"]
    sampler = TripletSampler(test_c, i_max)
    rng = stream_rng(cfg["seed"], STREAM_PROJECT)
    windows, labels = [], []
    for conv in test_c.conversations:
        for t in range(1, len(conv.utterances)):
            real = make_context(conv, t, min(i_max, t))
            fake = sampler.sample_unrelated(real, rng)
            windows += [real, fake]
            labels += [(f"{conv.id}:{t}", conv.id, "real"), (f"{conv.id}:{t}", conv.id, "fake")]
    vectors = prosody.concat_context_vectors(windows, features, params_text, params_audio)
    coords, variances = metrics_mod.project_embeddings(vectors)
    write_csv(
        out_dir / "projection.csv",
        ["id", "conversation_id", "context_kind", "x", "y"],
        [(i, c, k, coords[n, 0], coords[n, 1]) for n, (i, c, k) in enumerate(labels)],
    )
    write_json(
        out_dir / "projection_meta.json",
        {"component_variances": variances.tolist(), "n_points": len(labels), "config": cfg},
    )
    _echo_config(cfg, args, out_dir, "project")
    print(f"projected {len(labels)} context vectors to {out_dir / 'projection.csv'}")
    return 0


def cmd_metrics(args) -> int:
    cfg = resolve_config(args)
    params = _frame_params(cfg)
    ref_samples, ref_sr = read_wav(args.ref)
    hyp_samples, hyp_sr = read_wav(args.hyp)
    ref = compute_frame_track(ref_samples, ref_sr, params)
    hyp = compute_frame_track(hyp_samples, hyp_sr, params)
    result = metrics_mod.evaluate_tracks(ref, hyp)
    print(f"MCD {result['mcd_db']:.4f}")
    if result["log_f0_rmse"] is None:
        print("log-F0 RMSE undefined (no mutually voiced aligned frames)")
    else:
        print(f"log-F0 RMSE {result['log_f0_rmse']:.4f}")
    if args.out_dir:
        out_dir = Path(args.out_dir)
        write_json(out_dir / "metrics.json", {"report": result, "config": cfg})
        _echo_config(cfg, args, out_dir, "metrics")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_common(parser, out_dir_required=True):
    parser.add_argument("--config", help="JSON config file; flags override its values")
    parser.add_argument("--seed", type=int, help="global seed (default 0)")
    if out_dir_required:
        parser.add_argument("--out-dir", required=True, help="directory for all outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convctx",
        description="Contrastive context representations for conversational speech.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", help="generate a synthetic conversational corpus")
    _add_common(p)
    p.set_defaults(func=cmd_synth_corpus)

    p = sub.add_parser("featurize", help="compute and cache per-utterance features")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--workers", type=int, help="data-parallel featurization workers")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="contrastive pretext training (optionally plus prosody head)")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True, help="directory written by featurize")
    p.add_argument("--strategy", choices=["S1", "S2", "S3"])
    p.add_argument("--margin", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--steps", type=int)
    p.add_argument("--context-max", type=int, dest="context_max")
    p.add_argument("--with-apm", action="store_true", dest="with_apm")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grad-check", help="finite-difference check of all analytic gradients")
    _add_common(p)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("eval", help="held-out triplet satisfaction and prosody-head evaluation")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--margin", type=float)
    p.add_argument("--context-max", type=int, dest="context_max")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sensitivity", help="real-versus-fake context sensitivity report")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-fakes", type=int, dest="n_fakes")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("project", help="2-D PCA export of real and fake context vectors")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("metrics", help="MCD and log-F0 RMSE between two WAV files")
    p.add_argument("ref")
    p.add_argument("hyp")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_metrics)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConvctxError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
