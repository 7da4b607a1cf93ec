"""
Command-line entry point for the MTLAM toy pipeline.
Generates datasets, trains, evaluates, runs ablations and diagnostics.
"""
import argparse
import json
import logging
import os
import sys
from typing import List, Optional, Sequence

import pandas as pd
from pydantic import ValidationError

from checkpoint import CheckpointError, load_checkpoint
from config import ConfigError, ExperimentConfig, Settings, load_experiment_config, setup_logging
from pipeline import (
    AudioPathViolation, GradcheckFailure, NumericalError, Trainer, ablate, build_model, context_consistency,
    evaluate, gradcheck_model, infer_visual_only, model_from_checkpoint
)
from temporal import AlignmentError
from toytask import (
    RecordFormatError, TaskConfigError, ToyTask, bayes_oracle_report, load_records, nearest_prototype_accuracy,
    save_records
)

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')
DEFAULT_SUBSETS = ([], [1], [2], [3], [1, 2], [2, 3], [1, 2, 3])

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_INTERRUPTED = 130


class UsageError(ValueError):
    """Raised for invalid command-line arguments."""
    pass


def parse_levels(text: str) -> List[int]:
    try:
        return sorted({int(part) for part in text.split(',') if part.strip()})
    except ValueError:
        raise UsageError(f"Levels must be comma-separated integers, got {text!r}")


def parse_subsets(text: str) -> List[List[int]]:
    """'none;1;2;1,2' -> [[], [1], [2], [1, 2]]."""
    return [[] if part.strip().lower() in ('', 'none', 'baseline') else parse_levels(part)
            for part in text.split(';')]


def _load_config(path: Optional[str], settings: Settings) -> ExperimentConfig:
    return load_experiment_config(path or settings.default_config)


def _split_path(data_dir: str, split: str) -> str:
    return os.path.join(data_dir, f"{split}.mtlt")


def _load_split(data_dir: str, split: str):
    if split not in SPLITS:
        raise UsageError(f"Unknown split {split!r}; expected one of {SPLITS}")
    return load_records(_split_path(data_dir, split), name=split)


def cmd_gen(args, settings: Settings) -> int:
    """Write the train/val/test record files and print the oracle baselines."""
    cfg = _load_config(args.config, settings)
    out_dir = args.out or os.path.join(cfg.output_dir, 'data')
    task = ToyTask(cfg.task)
    splits = task.generate(cfg.data.n_samples, cfg.data.split_seed, cfg.data.val_fraction, cfg.data.test_fraction)
    os.makedirs(out_dir, exist_ok=True)
    for split in splits:
        save_records(split, _split_path(out_dir, split.name))
    manifest = {
        'task': cfg.task.model_dump(mode='json'),
        'data': cfg.data.model_dump(mode='json'),
        'counts': {split.name: len(split) for split in splits},
    }
    with open(os.path.join(out_dir, 'dataset.json'), 'w') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)

    test = splits[2]
    for split in splits:
        print(f"{split.name}: {len(split)} samples")
    for modality in ('visual', 'both'):
        report = bayes_oracle_report(cfg.task, test, modality=modality)
        print(f"Bayes oracle ({modality}, test): {report.accuracy:.4f} "
              f"[{report.ci_low:.4f}, {report.ci_high:.4f}]")
    for modality in ('visual', 'audio'):
        print(f"Nearest prototype ({modality}, test): {nearest_prototype_accuracy(cfg.task, test, modality):.4f}")
    return EXIT_OK


def cmd_train(args, settings: Settings) -> int:
    """Train one model (optionally resuming) and write checkpoints and metric CSVs."""
    cfg = _load_config(args.config, settings)
    if args.levels is not None:
        cfg = cfg.with_levels(parse_levels(args.levels))
    out_dir = args.out or os.path.join(cfg.output_dir, 'train')
    train_set = _load_split(args.data, 'train')
    val_set = _load_split(args.data, 'val')

    model = build_model(cfg.model)
    resume = load_checkpoint(args.resume, cfg.model) if args.resume else None
    best, log = Trainer(model, out_dir).train(train_set, val_set, resume)
    final = log.epochs[-1] if log.epochs else {}
    print(f"Best checkpoint at step {best.step}: val acc_va={best.metadata.get('val_acc_va', float('nan')):.4f}")
    if final:
        print(f"Final epoch: acc_va={final['acc_va']:.4f} acc_v={final['acc_v']:.4f} acc_a={final['acc_a']:.4f}")
    print(f"Outputs written to {out_dir}")
    return EXIT_OK


def cmd_eval(args, settings: Settings) -> int:
    """Per-head accuracy of a checkpoint on one split, printed and saved as CSV."""
    ckpt = load_checkpoint(args.checkpoint)
    split = _load_split(args.data, args.split)
    report = evaluate(ckpt, split)
    out_path = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), f"eval_{args.split}.csv")

    pd.DataFrame([report.as_row()]).to_csv(out_path, index=False)
    print(f"{report.split}: n={report.n} acc_va={report.acc_va:.4f} acc_v={report.acc_v:.4f} acc_a={report.acc_a:.4f}")
    return EXIT_OK


def cmd_ablate(args, settings: Settings) -> int:
    """Train every level subset over the configured seeds and write the accuracy table."""
    cfg = _load_config(args.config, settings)
    subsets = parse_subsets(args.subsets) if args.subsets else [list(s) for s in DEFAULT_SUBSETS]
    splits = tuple(_load_split(args.data, split) for split in SPLITS)
    table = ablate(cfg, subsets, splits, threads=settings.threads)
    out_path = args.out or os.path.join(cfg.output_dir, 'ablation.csv')
    directory = os.path.dirname(out_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    table.to_csv(out_path, index=False, float_format='%.2f')
    print(table.to_string(index=False))
    print(f"Ablation table written to {out_path}")
    return EXIT_OK


def cmd_dump_addressing(args, settings: Settings) -> int:
    """Visual-only inference on one sample; addressing scores of one level to CSV."""
    ckpt = load_checkpoint(args.checkpoint)
    if args.level not in ckpt.config.levels:
        raise UsageError(f"Level {args.level} has no memory (enabled levels: {ckpt.config.levels})")
    split = _load_split(args.data, args.split)
    if not 0 <= args.sample < len(split):
        raise UsageError(f"Sample {args.sample} out of range 0..{len(split) - 1}")
    result = infer_visual_only(ckpt, split.visual[args.sample])
    out_path = args.out or f"addressing_level{args.level}_sample{args.sample}.csv"
    result.scores[args.level].save_csv(out_path)
    print(f"Predicted {result.label} (label {int(split.labels[args.sample])}); addressing written to {out_path}")
    return EXIT_OK


def cmd_gradcheck(args, settings: Settings) -> int:
    """Finite-difference check of the full model; exits 3 when any entry exceeds the tolerance."""
    if args.n_params < 1:
        raise UsageError(f"--n-params must be positive, got {args.n_params}")
    if args.instances < 1:
        raise UsageError(f"--instances must be positive, got {args.instances}")
    cfg = _load_config(args.config, settings)
    report = gradcheck_model(cfg, args.n_params, args.seed, args.instances)
    for entry in report.entries:
        print(f"#{entry.instance} {entry.name}[{entry.index}]: analytic={entry.analytic:.6e} "
              f"numeric={entry.numeric:.6e} rel={entry.rel_error:.2e}")
    if not report.passed:
        raise GradcheckFailure(report)
    print(f"PASSED: max relative error {report.max_error:.3e} < {report.tolerance:.0e}")
    return EXIT_OK


def cmd_context_check(args, settings: Settings) -> int:
    """Matched vs mismatched context similarity of addressing scores at one level."""
    cfg = _load_config(args.config, settings)
    ckpt = load_checkpoint(args.checkpoint)
    if args.level not in ckpt.config.levels:
        raise UsageError(f"Level {args.level} has no memory (enabled levels: {ckpt.config.levels})")
    report = context_consistency(model_from_checkpoint(ckpt), ToyTask(cfg.task), args.level,
                                 n_pairs=args.pairs, seed=args.seed)
    print(f"Level {report.level}: matched {report.matched_mean:.4f}, mismatched {report.mismatched_mean:.4f}, "
          f"difference {report.difference:.4f} (95% CI [{report.ci_low:.4f}, {report.ci_high:.4f}])")
    return EXIT_OK


COMMANDS = {
    'gen': cmd_gen,
    'train': cmd_train,
    'eval': cmd_eval,
    'ablate': cmd_ablate,
    'dump-addressing': cmd_dump_addressing,
    'gradcheck': cmd_gradcheck,
    'context-check': cmd_context_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Multi-temporal lip-audio memory toy pipeline')
    parser.add_argument('--verbose', '-v', action='store_true', help='Enable verbose logging')
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('gen', help='Generate train/val/test record files')
    gen.add_argument('--config')
    gen.add_argument('--out')

    train = sub.add_parser('train', help='Train one model')
    train.add_argument('--config')
    train.add_argument('--data', required=True)
    train.add_argument('--out')
    train.add_argument('--levels', help='Comma-separated memory levels; empty string trains the baseline')
    train.add_argument('--resume', help='Checkpoint to resume from')

    ev = sub.add_parser('eval', help='Evaluate a checkpoint on one split')
    ev.add_argument('--checkpoint', required=True)
    ev.add_argument('--data', required=True)
    ev.add_argument('--split', default='test')
    ev.add_argument('--out')

    abl = sub.add_parser('ablate', help='Train every level subset over the configured seeds')
    abl.add_argument('--config')
    abl.add_argument('--data', required=True)
    abl.add_argument('--subsets', help="Semicolon-separated subsets, e.g. 'none;1;2;3;1,2;2,3;1,2,3'")
    abl.add_argument('--out')

    dump = sub.add_parser('dump-addressing', help='Write one sample\'s addressing scores as CSV')
    dump.add_argument('--checkpoint', required=True)
    dump.add_argument('--data', required=True)
    dump.add_argument('--split', default='test')
    dump.add_argument('--sample', type=int, default=0)
    dump.add_argument('--level', type=int, required=True)
    dump.add_argument('--out')

    grad = sub.add_parser('gradcheck', help='Finite-difference check of the full model')
    grad.add_argument('--config')
    grad.add_argument('--n-params', type=int, default=20)
    grad.add_argument('--seed', type=int, default=0)
    grad.add_argument('--instances', type=int, default=10, help='Random model and batch instances to check')

    ctx = sub.add_parser('context-check', help='Addressing similarity for matched vs mismatched context')
    ctx.add_argument('--checkpoint', required=True)
    ctx.add_argument('--config')
    ctx.add_argument('--level', type=int, default=2)
    ctx.add_argument('--pairs', type=int, default=100)
    ctx.add_argument('--seed', type=int, default=0)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Command-line interface for the MTLAM pipeline."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG

    settings = Settings()
    setup_logging(settings, verbose=args.verbose)

    try:
        return COMMANDS[args.command](args, settings)
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return EXIT_INTERRUPTED
    except (ConfigError, TaskConfigError, AlignmentError, UsageError, ValidationError) as e:
        logger.error(f"Invalid configuration or arguments: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, GradcheckFailure) as e:
        logger.error(f"Numerical failure: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, CheckpointError, RecordFormatError) as e:
        logger.error(f"I/O failure: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except AudioPathViolation as e:
        logger.error(f"Inference contract violated: {e}")
        return EXIT_ERROR
    except Exception as e:
        logger.error(f"Unexpected error: {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
