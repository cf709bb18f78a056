"""Command-line entry point: ``stickersel <command> ...``.

Exit codes: 0 success, 2 config or input error, 3 numeric failure,
4 checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from .autodiff import DimensionError
from .corpus import (ConfigError, CorpusFormatError, GeneratorConfig, ReferentialIntegrityError,
                     generate_corpus, load_corpus, oracle_accuracy, save_corpus)
from .evaluation import (EvaluationError, NumericScoreError, ScoringOptions, checkpoint_digest, diversity_csv,
                         evaluate, metrics_json, paired_from_rankings, prediction_diversity, rankings_csv,
                         read_rankings, saliency_csv, word_saliency)
from .model import CheckpointError, CheckpointMismatchError, ModelConfig, load_checkpoint
from .training import (VARIANTS, LossWeights, MaskingPolicy, NumericError, TrainConfig, TrainingAborted,
                       apply_variant, corpus_vocab, full_model_grad_check, train)
from .vocab import Vocabulary

log = logging.getLogger("stickersel")

CONFIG_VERSION = 1
CONFIG_SECTIONS = ("generator", "model", "train", "loss_weights", "masking", "eval")
EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 2, 3, 4
GRAD_CHECK_TOLERANCE = 1e-4


class InputError(ValueError):
    pass


@dataclass
class EvalConfig:
    split: str = "hard"
    protocol: str = "rall"
    eval_seed: int = 0
    jobs: int = 1

    def validate(self) -> None:
        if self.split not in ("easy", "hard", "valid"):
            raise ValueError("eval split must be easy, hard or valid")
        if self.protocol.lower() not in ("r10", "rall"):
            raise ValueError("eval protocol must be r10 or rall")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")


@dataclass
class RunConfig:
    generator: GeneratorConfig
    model: dict
    train: TrainConfig
    loss_weights: LossWeights
    masking: MaskingPolicy
    eval: EvalConfig

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig.from_dict({**self.model, "vocab_size": vocab_size})


def parse_config(doc: dict) -> RunConfig:
    """Validate a config document; every section and field is optional."""
    if not isinstance(doc, dict):
        raise InputError("config must be a JSON object")
    doc = dict(doc)
    version = doc.pop("config_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise InputError(f"unsupported config_version {version!r}")
    unknown = set(doc) - set(CONFIG_SECTIONS)
    if unknown:
        raise InputError(f"unknown config keys: {sorted(unknown)}")
    try:
        model = dict(doc.get("model", {}))
        if "vocab_size" in model:
            raise ValueError("model.vocab_size is derived from the corpus and cannot be set")
        ModelConfig.from_dict({**model, "vocab_size": 6})
        eval_section = doc.get("eval", {})
        unknown_eval = set(eval_section) - set(EvalConfig.__dataclass_fields__)
        if unknown_eval:
            raise ValueError(f"unknown eval keys: {sorted(unknown_eval)}")
        eval_cfg = EvalConfig(**eval_section)
        eval_cfg.validate()
        return RunConfig(
            generator=GeneratorConfig.from_dict(doc.get("generator", {})),
            model=model,
            train=TrainConfig.from_dict(doc.get("train", {})),
            loss_weights=LossWeights.from_dict(doc.get("loss_weights", {})),
            masking=MaskingPolicy.from_dict(doc.get("masking", {})),
            eval=eval_cfg,
        )
    except (TypeError, ValueError) as exc:
        raise InputError(str(exc)) from exc


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return parse_config({})
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise InputError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    return parse_config(doc)


def _load_data(path: str):
    data = Path(path)
    if not data.is_dir():
        raise InputError(f"data directory not found: {path}")
    try:
        return load_corpus(data)
    except FileNotFoundError as exc:
        raise InputError(f"missing corpus file: {exc.filename}") from exc


def _prepare_out(path: str, force: bool = False) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise InputError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


# commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config).generator
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = _prepare_out(args.out, args.force)
    corpus = generate_corpus(cfg)
    save_corpus(corpus, out)
    labeled = sum(s.semantic_label is not None for s in corpus.stickers)
    print(f"stickers {len(corpus.stickers)} ({labeled} labeled)")
    for name in ("train", "valid", "easy_test", "hard_test"):
        print(f"{name} {len(corpus.split(name))}")
    print(f"generator oracle accuracy (hard) {oracle_accuracy(corpus.hard_test, corpus.stickers, cfg):.4f}")
    return EXIT_OK


def _train_settings(args, run: RunConfig) -> tuple[LossWeights, TrainConfig, MaskingPolicy, dict]:
    """Weights/config/masking/model dict, either from --from-manifest or config + flags."""
    if args.from_manifest:
        manifest = json.loads(Path(args.from_manifest).read_text(encoding="utf-8"))
        try:
            weights = LossWeights.from_dict(manifest["loss_weights"])
            train_cfg = TrainConfig.from_dict(manifest["train"])
            policy = MaskingPolicy.from_dict(manifest["masking"])
            model = {k: v for k, v in manifest["model"].items() if k != "vocab_size"}
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"bad manifest {args.from_manifest}: {exc}") from exc
        return weights, train_cfg, policy, model
    train_cfg = run.train
    overrides = {"total_steps": args.steps, "train_subset": args.train_subset, "seed": args.seed}
    train_cfg = replace(train_cfg, **{k: v for k, v in overrides.items() if v is not None})
    weights, train_cfg = apply_variant(args.variant, run.loss_weights, train_cfg)
    train_cfg.validate()
    return weights, train_cfg, run.masking, run.model


def cmd_train(args) -> int:
    run = load_config(args.config)
    weights, train_cfg, policy, model = _train_settings(args, run)
    corpus = _load_data(args.data)
    vocab = corpus_vocab(corpus)
    model_cfg = ModelConfig.from_dict({**model, "vocab_size": len(vocab)})
    out = _prepare_out(args.out, args.force or args.resume)
    extra = {"variant": args.variant, "data_seed": corpus.config.seed if corpus.config else None}
    if args.from_manifest:
        extra["variant"] = json.loads(Path(args.from_manifest).read_text(encoding="utf-8")).get("variant")
    result = train(corpus, vocab, model_cfg, train_cfg, weights, policy, out_dir=out, resume=args.resume,
                   manifest_extra=extra, log_every=args.log_every)
    last = result.loss_log[-1] if result.loss_log else None
    if last:
        print(f"step {last['step']} total {last['total']:.4f} main {last['main']:.4f}")
    print(f"wrote {out / 'checkpoint.stkm'}")
    return EXIT_OK


def _load_model(args, corpus, run: RunConfig):
    """Checkpoint params plus scoring options and vocabulary from the run directory."""
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise InputError(f"checkpoint not found: {ckpt}")
    run_dir = ckpt.parent
    vocab_path = run_dir / "vocab.txt"
    vocab = Vocabulary.load(vocab_path) if vocab_path.exists() else corpus_vocab(corpus)
    manifest_path = run_dir / "run_manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        options = ScoringOptions(manifest["train"]["semantic_region"], manifest["train"]["ocr_as_input"])
        model = {k: v for k, v in manifest["model"].items() if k != "vocab_size"}
    else:
        options = ScoringOptions.from_train(run.train)
        model = run.model
    if args.config:
        model = run.model or model
    expected = ModelConfig.from_dict({**model, "vocab_size": len(vocab)})
    cfg, params = load_checkpoint(ckpt, expected)
    return cfg, params, vocab, options


def _eval_settings(args, run: RunConfig) -> EvalConfig:
    cfg = run.eval
    overrides = {"split": args.split, "protocol": args.protocol, "eval_seed": args.eval_seed,
                 "jobs": getattr(args, "jobs", None)}
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    cfg.validate()
    return cfg


_SPLIT_FILES = {"easy": "easy_test.jsonl", "hard": "hard_test.jsonl", "valid": "valid.jsonl"}


def _require_split(data: str, split: str) -> None:
    path = Path(data) / _SPLIT_FILES[split]
    if not path.is_file():
        raise InputError(f"missing split file: {path}")


def cmd_eval(args) -> int:
    run = load_config(args.config)
    settings = _eval_settings(args, run)
    _require_split(args.data, settings.split)
    corpus = _load_data(args.data)
    cfg, params, vocab, options = _load_model(args, corpus, run)
    samples = corpus.split(settings.split)
    result = evaluate(samples, corpus, params, cfg, vocab, settings.protocol, settings.eval_seed, options,
                      settings.jobs)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(
        metrics_json(result.report, settings.split, settings.eval_seed, checkpoint_digest(args.checkpoint)),
        encoding="utf-8")
    (out / "rankings.csv").write_text(rankings_csv(result.rankings), encoding="utf-8")
    r = result.report
    print(f"{r.protocol} {settings.split} n={r.n_samples} R@1 {r.recall[1]:.4f} R@2 {r.recall[2]:.4f} "
          f"R@5 {r.recall[5]:.4f} MRR {r.mrr:.4f}")
    return EXIT_OK


def cmd_saliency(args) -> int:
    run = load_config(args.config)
    _require_split(args.data, args.split)
    corpus = _load_data(args.data)
    cfg, params, vocab, options = _load_model(args, corpus, run)
    stickers = corpus.sticker_map()
    samples = corpus.split(args.split)[:args.n_samples]
    maps = [word_saliency(s, stickers[s.sticker_id], params, cfg, vocab, options) for s in samples]
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "saliency.csv").write_text(saliency_csv(maps), encoding="utf-8")
    print(f"wrote saliency for {len(maps)} samples to {out / 'saliency.csv'}")
    return EXIT_OK


def cmd_diversity(args) -> int:
    run = load_config(args.config)
    _require_split(args.data, args.split)
    corpus = _load_data(args.data)
    cfg, params, vocab, options = _load_model(args, corpus, run)
    hist = prediction_diversity(corpus.split(args.split), corpus, params, cfg, vocab, options, args.jobs)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "diversity.csv").write_text(diversity_csv(hist), encoding="utf-8")
    print(f"top-1 predictions cover {hist.coverage():.3f} of {len(hist.sticker_ids)} stickers")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    run = load_config(args.config)
    corpus = _load_data(args.data) if args.data else generate_corpus(run.generator)
    vocab = corpus_vocab(corpus)
    model_cfg = run.model_config(len(vocab))
    result = full_model_grad_check(corpus, vocab, model_cfg, run.loss_weights, run.masking, seed=args.seed,
                                   n_coords=args.coords)
    for name, (n, err, refined) in result.per_tensor.items():
        log.info("%-28s %4d coords  max rel err %.3e  (%d five-point)", name, n, err, refined)
    ok = result.max_rel_error <= GRAD_CHECK_TOLERANCE
    print(json.dumps({"max_rel_error": result.max_rel_error, "tolerance": GRAD_CHECK_TOLERANCE,
                      "passed": ok, "loss_terms": result.loss_terms}, sort_keys=True))
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_t_test(args) -> int:
    try:
        a, b = read_rankings(args.a), read_rankings(args.b)
    except FileNotFoundError as exc:
        raise InputError(f"rankings file not found: {exc.filename}") from exc
    res = paired_from_rankings(a, b)
    print(json.dumps({"t": res.t, "p": res.p, "n": res.n, "mean_difference": res.mean_difference,
                      "degenerate": res.degenerate}, sort_keys=True))
    return EXIT_OK


# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stickersel", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="data seed (overrides generator.seed)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--steps", type=int)
    p.add_argument("--train-subset", type=int)
    p.add_argument("--seed", type=int, help="run seed (overrides train.seed)")
    p.add_argument("--from-manifest", help="reuse the settings of a previous run_manifest.json")
    p.add_argument("--resume", action="store_true", help="continue the run stored in --out")
    p.add_argument("--force", action="store_true")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    def model_args(p, split_default=None):
        p.add_argument("--config")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", choices=("easy", "hard", "valid"), default=split_default)
        p.add_argument("--out")

    p = sub.add_parser("eval", help="rank candidates and write metrics")
    model_args(p)
    p.add_argument("--protocol", choices=("r10", "rall"))
    p.add_argument("--eval-seed", type=int)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("saliency", help="per-token saliency of the main loss")
    model_args(p, "hard")
    p.add_argument("--n-samples", type=int, default=20)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("diversity", help="top-1 prediction histogram under the all-sticker protocol")
    model_args(p, "hard")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_diversity)

    p = sub.add_parser("grad-check", help="64-bit finite-difference check of the full loss")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=200)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("t-test", help="paired t-test on two rankings.csv files")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(func=cmd_t_test)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigError, CorpusFormatError, ReferentialIntegrityError, EvaluationError,
            FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingAborted, NumericError, NumericScoreError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointMismatchError, CheckpointError, DimensionError) as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
