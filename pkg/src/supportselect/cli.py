"""Command-line interface for the experiment pipeline.

Verbs mirror the pipeline stages so a run can be driven end to end
(``compare``) or step by step (``generate`` .. ``evaluate``). All artifacts
live under ``--out``. Exit code 0 on success; on failure the offending stage
name is printed and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .domains import load_dataset, save_dataset
from .errors import PipelineError, SupportSelectError
from .harness import (
    ExperimentConfig,
    RunReport,
    StageArtifacts,
    _stage_seed,
    adapt_cell,
    config_from_file,
    config_to_file,
    default_config,
    evaluate,
    load_checkpoint,
    load_rows,
    make_datasets,
    run_comparison,
    save_checkpoint,
    select_cell,
    train_source,
    write_metrics,
)
from .byol import train_byol
from .selection import load_manifest, save_manifest


def _load_config(args) -> ExperimentConfig:
    if args.config:
        return config_from_file(args.config)
    return default_config()


def _seed(args, config):
    return args.seed if args.seed is not None else config.seeds[0]


def _seed_dir(args, config, seed) -> Path:
    return Path(args.out) / f"seed{seed}"


def _cmd_generate(args):
    config = _load_config(args)
    seed = _seed(args, config)
    source, target = make_datasets(config, seed)
    data_dir = _seed_dir(args, config, seed) / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    save_dataset(source, data_dir / "source.dataset")
    save_dataset(target, data_dir / "target.dataset")
    print(f"wrote {data_dir / 'source.dataset'} and {data_dir / 'target.dataset'}")
    return 0


def _cmd_train_source(args):
    config = _load_config(args)
    seed = _seed(args, config)
    seed_dir = _seed_dir(args, config, seed)
    source = load_dataset(seed_dir / "data" / "source.dataset")
    model = train_source(config, seed, source=source)
    models_dir = seed_dir / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(models_dir / "source.ckpt", model)
    print(f"source training accuracy: {model.train_accuracy:.4f}")
    print(f"wrote {models_dir / 'source.ckpt'}")
    return 0


def _cmd_adapt_ssl(args):
    config = _load_config(args)
    seed = _seed(args, config)
    seed_dir = _seed_dir(args, config, seed)
    model = load_checkpoint(seed_dir / "models" / "source.ckpt")
    target = load_dataset(seed_dir / "data" / "target.dataset")
    byol_cfg = replace(config.byol, seed=_stage_seed(seed, 37))
    result = train_byol(model.backbone, target, byol_cfg)
    save_checkpoint(seed_dir / "models" / "fprime.ckpt", result.backbone)
    save_checkpoint(seed_dir / "models" / "projector.ckpt", result.projector)
    first = result.epoch_losses[0] if result.epoch_losses else float("nan")
    last = result.epoch_losses[-1] if result.epoch_losses else float("nan")
    print(f"self-supervision loss: first epoch {first:.4f}, final epoch {last:.4f}")
    print(f"wrote {seed_dir / 'models' / 'fprime.ckpt'}")
    return 0


def _load_artifacts(config, seed, seed_dir) -> StageArtifacts:
    source_data = load_dataset(seed_dir / "data" / "source.dataset")
    target_data = load_dataset(seed_dir / "data" / "target.dataset")
    source_model = load_checkpoint(seed_dir / "models" / "source.ckpt")
    art = StageArtifacts(seed, source_data, target_data, source_model)
    fprime_path = seed_dir / "models" / "fprime.ckpt"
    if fprime_path.exists():
        art.f_prime = load_checkpoint(fprime_path)
        art.projector = load_checkpoint(seed_dir / "models" / "projector.ckpt")
    if not config.class_balanced:
        from .pseudolabel import ensemble_pseudo_labels, single_backbone_pseudo_labels

        f, g = source_model.backbone, source_model.classifier
        if config.pseudo_mode == "ensemble":
            art.pseudo_table = ensemble_pseudo_labels(f, art.f_prime, g, target_data)
        elif config.pseudo_mode == "f_prime_only":
            art.pseudo_table = single_backbone_pseudo_labels(art.f_prime, g, target_data)
        else:
            art.pseudo_table = single_backbone_pseudo_labels(f, g, target_data)
    return art


def _apply_mode(config, mode):
    if mode is None:
        return config
    if mode == "class_balanced":
        return replace(config, class_balanced=True)
    return replace(config, pseudo_mode=mode, class_balanced=False)


def _cell_dir(seed_dir, selector, k) -> Path:
    d = seed_dir / "cells" / f"{selector}_k{k}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _cmd_select(args):
    config = _apply_mode(_load_config(args), args.mode)
    seed = _seed(args, config)
    seed_dir = _seed_dir(args, config, seed)
    art = _load_artifacts(config, seed, seed_dir)
    support = select_cell(config, art, args.selector, args.k)
    cell = _cell_dir(seed_dir, args.selector, args.k)
    save_manifest(support, cell / "support.manifest")
    print(f"selected {len(support)} samples; wrote {cell / 'support.manifest'}")
    return 0


def _cmd_adapt(args):
    config = _apply_mode(_load_config(args), args.mode)
    seed = _seed(args, config)
    seed_dir = _seed_dir(args, config, seed)
    art = _load_artifacts(config, seed, seed_dir)
    cell = _cell_dir(seed_dir, args.selector, args.k)
    support = load_manifest(cell / "support.manifest")
    model, which = adapt_cell(config, art, args.selector, args.k, support)
    save_checkpoint(cell / "adapted.ckpt", model)
    print(
        f"adapted backbone {which}; support CE "
        f"{model.state.support_ce_trace[0]:.4f} -> {model.state.support_ce_trace[-1]:.4f}"
    )
    print(f"wrote {cell / 'adapted.ckpt'}")
    return 0


def _cmd_evaluate(args):
    config = _apply_mode(_load_config(args), args.mode)
    seed = _seed(args, config)
    seed_dir = _seed_dir(args, config, seed)
    target = load_dataset(seed_dir / "data" / "target.dataset")
    cell = _cell_dir(seed_dir, args.selector, args.k)
    support = load_manifest(cell / "support.manifest")
    model = load_checkpoint(cell / "adapted.ckpt")
    metrics = evaluate(model, target, support.indices())
    metrics.update({"selector": args.selector, "k": args.k, "seed": seed})
    write_metrics(metrics, cell / "metrics.json")
    print(f"accuracy: {metrics['accuracy']:.4f} on {metrics['eval_size']} samples")
    print(f"wrote {cell / 'metrics.json'}")
    return 0


def _cmd_compare(args):
    config = _load_config(args)
    report = run_comparison(config, out_dir=args.out)
    print(report.render_table(), end="")
    print(f"artifacts under {args.out}")
    return 0


def _cmd_report(args):
    rows = load_rows(Path(args.out) / "rows.jsonl")
    report = RunReport(rows)
    table = report.render_table()
    with open(Path(args.out) / "report.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(table)
    print(table, end="")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="supportselect",
        description="Support-set selection experiments on synthetic domain shifts",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, cell=False):
        p.add_argument("--config", help="experiment config file (.ini); defaults to the built-in benchmark")
        p.add_argument("--out", required=True, help="artifact directory")
        p.add_argument("--seed", type=int, default=None, help="run seed (default: first config seed)")
        if cell:
            p.add_argument("--selector", required=True,
                           choices=("cluster", "random", "entropy", "mc_dropout"))
            p.add_argument("--k", type=int, required=True, help="shots per class")
            p.add_argument("--mode", default=None,
                           choices=("ensemble", "f_only", "f_prime_only", "class_balanced"),
                           help="pseudo-label / grouping mode override")

    common(sub.add_parser("generate", help="write the synthetic dataset pair"))
    common(sub.add_parser("train-source", help="train the source model"))
    common(sub.add_parser("adapt-ssl", help="self-supervised backbone adaptation"))
    common(sub.add_parser("select", help="build a support set"), cell=True)
    common(sub.add_parser("adapt", help="adapt BN statistics on the support set"), cell=True)
    common(sub.add_parser("evaluate", help="score the adapted model"), cell=True)
    common(sub.add_parser("compare", help="full multi-seed selector comparison"))
    rep = sub.add_parser("report", help="re-render the comparison table")
    rep.add_argument("--out", required=True)
    return parser


_HANDLERS = {
    "generate": _cmd_generate,
    "train-source": _cmd_train_source,
    "adapt-ssl": _cmd_adapt_ssl,
    "select": _cmd_select,
    "adapt": _cmd_adapt,
    "evaluate": _cmd_evaluate,
    "compare": _cmd_compare,
    "report": _cmd_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    handler = _HANDLERS[args.verb]
    try:
        return handler(args)
    except PipelineError as exc:
        print(f"error [{exc.stage}]: {exc.cause}", file=sys.stderr)
        return 1
    except SupportSelectError as exc:
        print(f"error [{args.verb}]: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error [{args.verb}]: missing artifact: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
