"""Command-line surface: gen-data, train, eval, caption, bench, gradcheck.

Every flag mirrors one config field; ``--help`` lists each field with its
default and provenance tag. Exit codes: 0 success, 1 validation error,
2 runtime failure. Each command writes its artifacts under one run
directory (gen-data writes only to its --out directory).
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .config import FIELDS, PRESETS, make_config, write_effective_config
from .data import Manifest, SyntheticSpec, build_caption_bank, generate_synthetic_corpus, split_dataset
from .checkpoint import load_parameters, save_parameters
from .errors import ConfigError, MilfuseError
from .fusion import FusionMode
from .gradcheck import grad_check
from .heads import LossWeights, caption_loss, classify_bag, multitask_loss
from .metrics import MetricsReport, MetricsRow
from .model import MILCaptionModel
from .tensor import Tensor, cross_entropy_from_logits
from .train import (
    BENCH_HEADER,
    bench_attention,
    evaluate_checkpoint,
    train_model,
    write_captions,
)

SUBCOMMANDS = ("gen-data", "train", "eval", "caption", "bench", "gradcheck")


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--preset", choices=sorted(PRESETS),
                        help="apply a named bundle of defaults")
    parser.add_argument("--config", metavar="FILE",
                        help="JSON file of config overrides")
    for f in FIELDS:
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(
            flag, dest=f"cfg_{f.name}", metavar=f.kind.__name__.upper(),
            help=f"{f.help} [default: {f.default}, {f.provenance}]",
        )


def _collect_overrides(args) -> dict:
    out = {}
    for f in FIELDS:
        val = getattr(args, f"cfg_{f.name}", None)
        if val is not None:
            out[f.name] = val
    return out


def _config_from_args(args):
    return make_config(preset=args.preset, file=args.config,
                       overrides=_collect_overrides(args))


def _run_dir(cfg) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = Path(cfg.out_root) / f"{stamp}-s{cfg.seed}"
    n = 0
    while path.exists():
        n += 1
        path = Path(cfg.out_root) / f"{stamp}-s{cfg.seed}.{n}"
    path.mkdir(parents=True)
    return path


def _load_corpus(cfg):
    data_dir = Path(cfg.data_dir)
    manifest = Manifest.load(data_dir / "manifest.json")
    return manifest, data_dir


def _build_model(cfg, manifest) -> MILCaptionModel:
    return MILCaptionModel(
        cfg, manifest.d_enc, len(manifest.vocab), manifest.num_classes, cfg.seed
    )


def cmd_gen_data(args) -> int:
    cfg = _config_from_args(args)
    out_dir = Path(args.out or cfg.data_dir)
    vocab, templates, variants = build_caption_bank(cfg.num_classes, cfg.vocab_size)
    spec = SyntheticSpec(
        num_bags=cfg.num_bags,
        num_classes=cfg.num_classes,
        d_enc=cfg.d_enc,
        m_range=(cfg.m_min, cfg.m_max),
        motif_strength=cfg.motif_strength,
        noise_std=cfg.noise_std,
        vocab=vocab,
        templates=templates,
        variants=variants,
        seed=cfg.seed,
    )
    manifest = generate_synthetic_corpus(spec, out_dir)
    manifest = split_dataset(
        manifest, (cfg.train_frac, cfg.val_frac, cfg.test_frac),
        cfg.seed, stratify=cfg.stratify,
    )
    manifest.save(out_dir / "manifest.json")
    write_effective_config(cfg, out_dir / "config.json")
    counts = {s: len(manifest.bags_in_split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest.bags)} bags to {out_dir} (splits: {counts})")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    manifest, data_dir = _load_corpus(cfg)
    run_dir = _run_dir(cfg)
    write_effective_config(cfg, run_dir / "config.json")
    print(f"run directory: {run_dir}")
    outcome = train_model(manifest, data_dir, cfg, log=print)
    save_parameters(run_dir / "checkpoint.pm3w", sorted(outcome.best_state.items()))
    write_effective_config(cfg, run_dir / "checkpoint.config.json")
    outcome.report.write_csv(run_dir / "metrics.csv")
    outcome.report.write_json(run_dir / "final.json")
    print(
        f"best val accuracy {outcome.best_val_accuracy:.3f} at epoch "
        f"{outcome.best_epoch}; checkpoint saved to {run_dir / 'checkpoint.pm3w'}"
    )
    return 0


def _checkpoint_state(cfg):
    if not cfg.checkpoint:
        raise ConfigError("field 'checkpoint' is required for this command")
    return load_parameters(cfg.checkpoint)


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    manifest, data_dir = _load_corpus(cfg)
    state = _checkpoint_state(cfg)
    run_dir = _run_dir(cfg)
    write_effective_config(cfg, run_dir / "config.json")
    mode = FusionMode(cfg.eval_mode)
    result = evaluate_checkpoint(state, manifest, data_dir, cfg, cfg.eval_split, mode)
    report = MetricsReport()
    report.add(MetricsRow(epoch=-1, split=cfg.eval_split,
                          accuracy=result["accuracy"], bleu4=result.get("bleu4")))
    report.final = {k: v for k, v in result.items() if k != "decoded"}
    report.write_csv(run_dir / "metrics.csv")
    report.write_json(run_dir / "final.json")
    bleu = result.get("bleu4")
    bleu_txt = "" if bleu is None else f"  bleu4 {bleu:.4f}"
    print(f"{cfg.eval_split} [{mode.value}]  accuracy {result['accuracy']:.4f}{bleu_txt}")
    return 0


def cmd_caption(args) -> int:
    cfg = _config_from_args(args)
    manifest, data_dir = _load_corpus(cfg)
    state = _checkpoint_state(cfg)
    run_dir = _run_dir(cfg)
    write_effective_config(cfg, run_dir / "config.json")
    result = evaluate_checkpoint(
        state, manifest, data_dir, cfg, cfg.eval_split, FusionMode.IMAGE_ONLY
    )
    out_path = run_dir / "captions.tsv"
    write_captions(out_path, result["decoded"], manifest.vocab)
    print(out_path.read_text(encoding="utf-8"), end="")
    print(f"# bleu4 {result['bleu4']:.4f} over {result['n_bags']} bags -> {out_path}",
          file=sys.stderr)
    return 0


def cmd_bench(args) -> int:
    cfg = _config_from_args(args)
    run_dir = _run_dir(cfg)
    write_effective_config(cfg, run_dir / "config.json")
    rows = bench_attention(
        cfg.bench_sizes, cfg.landmarks, cfg.bench_repeats,
        dim=cfg.bench_dim, seed=cfg.seed, pinv_iterations=cfg.pinv_iterations,
    )
    lines = [BENCH_HEADER] + [r.as_csv() for r in rows]
    (run_dir / "bench.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


def cmd_gradcheck(args) -> int:
    if args.preset is None:
        args.preset = "tiny"
    cfg = _config_from_args(args)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x6C]))
    vocab, templates, variants = build_caption_bank(cfg.num_classes, cfg.vocab_size)
    model = MILCaptionModel(cfg, cfg.d_enc, cfg.vocab_size, cfg.num_classes, cfg.seed)
    feats_arr = rng.normal(size=(cfg.m_min, cfg.d_enc))
    caption = [t if t >= 0 else variants[0][0] for t in templates[0]][: cfg.max_text_len - 1]
    label = 0
    weights = LossWeights(cfg.alpha)

    def f():
        feats = Tensor(feats_arr)
        fused = model.fuse(feats, caption, FusionMode.IMAGE_AND_TEXT)
        _, logits_mean = classify_bag(fused, model.head)
        l_c = cross_entropy_from_logits(logits_mean, label)
        fused_io = model.fuse(feats, None, FusionMode.IMAGE_ONLY)
        l_g = caption_loss(fused_io, caption, model.decoder)
        return multitask_loss(l_c, l_g, weights)

    report = grad_check(f, model.named_parameters())
    for line in report.lines():
        print(line)
    print(f"max relative error {report.max_rel_err:.3e} "
          f"(tol {report.tol}, step {report.step})")
    if not report.passed:
        print("gradcheck FAILED", file=sys.stderr)
        return 2
    print("gradcheck passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="milfuse",
        description=(
            "Bag-of-instances classification and captioning: synthetic data "
            "generation, multi-task training, evaluation, caption decoding, "
            "attention benchmarking, and gradient verification."
        ),
    )
    sub = parser.add_subparsers(dest="command", parser_class=_Parser,
                                metavar="{" + ",".join(SUBCOMMANDS) + "}")
    specs = {
        "gen-data": ("generate a synthetic corpus", cmd_gen_data),
        "train": ("train the multi-task model", cmd_train),
        "eval": ("evaluate a checkpoint", cmd_eval),
        "caption": ("decode captions for a split", cmd_caption),
        "bench": ("benchmark exact vs landmark attention", cmd_bench),
        "gradcheck": ("finite-difference check of all gradients", cmd_gradcheck),
    }
    for name, (help_text, func) in specs.items():
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        if name == "gen-data":
            p.add_argument("--out", help="output directory (defaults to data_dir)")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        print("error: a subcommand is required", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (MilfuseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
