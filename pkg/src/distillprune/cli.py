"""Command-line entry point: ``run``, ``compare``, ``power-report``, ``presets``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional, Tuple

import torch

from . import data as datamod
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, preset_path
from .errors import ConfigError
from .masking import effective_size
from .models import build_model, restore_snapshot
from .pruning import PruneConfig, presparsify_lth
from .report import (
    RunReport,
    compare_reports,
    comparison_csv,
    comparison_text,
    ensure_dir,
    power_report_text,
    write_metrics_csv,
)
from .telemetry import energy_joules, read_power_log, sample_power
from .training import train

log = logging.getLogger(__name__)

SYNTHETIC_SEED = 1234  # corpus generation is independent of the run seed


def _parse_synthetic(root: str, default_count: int) -> Optional[int]:
    if root == "synthetic":
        return default_count
    if root.startswith("synthetic:"):
        return int(root.split(":", 1)[1])
    return None


def _prepare_data(cfg: ExperimentConfig, out_dir: str):
    """Build train/val handles and patch the model specs to the data."""
    if cfg.dataset == "cifar":
        count = _parse_synthetic(cfg.data_root, 10)
        root = cfg.data_root
        if count is not None:
            root = os.path.join(out_dir, "synthetic-images")
            if not os.path.isdir(os.path.join(root, "cifar-100-python")):
                log.info("generating synthetic image corpus (%d classes)", count)
                datamod.make_synthetic_image_archive(
                    ensure_dir(root), classes=count, seed=SYNTHETIC_SEED
                )
        train_h = datamod.load_images(root, "train", cfg.subset_fraction, cfg.seed)
        val_h = datamod.load_images(root, "val")
        for spec, name in ((cfg.teacher, "teacher"), (cfg.student, "student")):
            if spec.num_outputs != train_h.class_count:
                raise ConfigError(
                    f"{name} num_outputs={spec.num_outputs} but the corpus has "
                    f"{train_h.class_count} classes"
                )
        return train_h, val_h, cfg.teacher, cfg.student

    rows = _parse_synthetic(cfg.data_root, 2000)
    path = cfg.data_root
    if rows is not None:
        path = os.path.join(out_dir, "synthetic-movies.csv")
        if not os.path.isfile(path):
            log.info("generating synthetic movie table (%d rows)", rows)
            datamod.make_synthetic_movie_table(rows, seed=SYNTHETIC_SEED).to_csv(
                path, index=False
            )
    manifest = datamod.load_manifest(cfg.movie_manifest) if cfg.movie_manifest else None
    table = datamod.load_movies(path, manifest)
    train_t, test_t = datamod.split_by_year(table)
    train_h, val_h = datamod.movie_handles(train_t, test_t, cfg.feature_group)
    teacher = cfg.teacher.from_dict(
        {**cfg.teacher.to_dict(), "input_dim": train_h.feature_dim, "task": "regression", "num_outputs": 1}
    )
    student = cfg.student.from_dict(
        {**cfg.student.to_dict(), "input_dim": train_h.feature_dim, "task": "regression", "num_outputs": 1}
    )
    return train_h, val_h, teacher, student


def _acquire_teacher(cfg: ExperimentConfig, teacher_spec, handles, out_dir: str):
    needs_teacher = cfg.beta > 0 or cfg.alpha_kd > 0
    if not needs_teacher:
        return None
    if cfg.teacher_checkpoint:
        bundle = load_checkpoint(cfg.teacher_checkpoint)
        if bundle.spec.family != teacher_spec.family or bundle.spec.task != teacher_spec.task:
            raise ConfigError(
                f"teacher checkpoint is a {bundle.spec.family}/{bundle.spec.task} model, "
                f"config wants {teacher_spec.family}/{teacher_spec.task}"
            )
        log.info("loaded teacher from %s (epoch %d)", cfg.teacher_checkpoint, bundle.epoch)
        return bundle.model
    if cfg.teacher_epochs < 1:
        raise ConfigError(
            "distillation requires a teacher: set teacher_checkpoint or teacher_epochs"
        )
    log.info("training teacher for %d epochs", cfg.teacher_epochs)
    teacher = build_model(teacher_spec, cfg.seed + 7919)
    teacher_cfg = cfg.with_overrides(
        strategy="sad",
        beta=0.0,
        alpha_kd=0.0,
        epochs=cfg.teacher_epochs,
        lr=cfg.teacher_lr if cfg.teacher_lr is not None else cfg.lr,
        prune_rate=None,
        prune_every=None,
        prune_target=None,
    )
    state, ticket = train(teacher_cfg, None, teacher, handles)
    if ticket is not None and ticket.checkpoint_ref is not None:
        restore_snapshot(teacher, ticket.checkpoint_ref.state)
    path = os.path.join(out_dir, "teacher.pt")
    save_checkpoint(path, teacher, None, epoch=cfg.teacher_epochs, seed=cfg.seed + 7919)
    log.info("teacher ready (best val %s)", ticket.metric if ticket else "n/a")
    return teacher


def print_schedule(cfg: ExperimentConfig) -> dict:
    """Resolve and print the run schedule without training (--dry-run)."""
    events = cfg.prune_schedule()
    drops = cfg.lr_drops()
    resolved = {
        "name": cfg.name,
        "strategy": cfg.strategy,
        "dataset": cfg.dataset,
        "epochs": cfg.epochs,
        "prune_events": events,
        "lr_drops": drops,
        "lr_values": [cfg.lr * cfg.lr_gamma**i for i in range(len(drops) + 1)],
        "prune_target": cfg.prune_target,
    }
    print(f"run {cfg.name}: strategy={cfg.strategy} dataset={cfg.dataset} epochs={cfg.epochs}")
    print(f"prune_events ({len(events)}): {' '.join(map(str, events)) or 'none'}")
    print(f"lr_drops: {' '.join(map(str, drops)) or 'none'}")
    print(
        "lr_values: "
        + " -> ".join(f"{v:g}" for v in resolved["lr_values"])
    )
    if cfg.prune_target is not None:
        print(f"prune_target: {cfg.prune_target}")
    return resolved


def execute_run(cfg: ExperimentConfig) -> RunReport:
    cfg.validate()
    out_dir = ensure_dir(cfg.out_dir)
    with open(os.path.join(out_dir, "resolved.cfg"), "w") as f:
        f.write(cfg.to_cfg_text())

    train_h, val_h, teacher_spec, student_spec = _prepare_data(cfg, out_dir)
    sampler = sample_power()
    teacher = _acquire_teacher(cfg, teacher_spec, (train_h, val_h), out_dir)

    initial_masks = None
    if cfg.student_checkpoint:
        bundle = load_checkpoint(cfg.student_checkpoint)
        student, initial_masks = bundle.model, bundle.masks
        log.info("resumed student from %s (epoch %d)", cfg.student_checkpoint, bundle.epoch)
    elif cfg.strategy == "ss-sad":
        log.info("pre-sparsifying student to %.0f%% sparsity", 100 * cfg.prune_target)
        student, initial_masks = presparsify_lth(
            student_spec,
            train_h,
            PruneConfig(rate=cfg.prune_rate, every=cfg.prune_every, strategy="ss-sad", scope=cfg.prune_scope),
            cfg.prune_target,
            seed=cfg.seed,
            lr=cfg.lr,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
            batch_size=cfg.batch_size,
        )
        log.info("pre-sparsified to %.1f%%", 100 * initial_masks.cumulative_sparsity)
    else:
        student = build_model(student_spec, cfg.seed)

    try:
        state, ticket = train(
            cfg, teacher, student, (train_h, val_h),
            initial_masks=initial_masks, power_sampler=sampler,
        )
    except Exception:
        abort_path = os.path.join(out_dir, "abort_checkpoint.pt")
        save_checkpoint(abort_path, student, initial_masks, epoch=-1, seed=cfg.seed)
        sampler.stop()
        log.error("run aborted; resumable checkpoint at %s", abort_path)
        raise

    plog = sampler.stop()
    power_path = os.path.join(out_dir, "power.csv")
    plog.save(power_path)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    write_metrics_csv(state.history, metrics_path)

    for cand in state.rounds:
        if cand.state is None:
            continue
        save_checkpoint(
            os.path.join(out_dir, f"round{cand.round:02d}_sparsity{cand.sparsity:.3f}.pt"),
            student,
            cand.masks,
            epoch=cand.best_epoch,
            seed=cfg.seed,
            state_dict=cand.state.entries,
        )

    ticket_path = None
    size = None
    final_record = state.history[-1] if state.history else None
    if ticket is not None and ticket.checkpoint_ref is not None:
        cand = ticket.checkpoint_ref
        ticket_path = os.path.join(out_dir, "winning_ticket.pt")
        save_checkpoint(
            ticket_path, student, cand.masks, epoch=cand.best_epoch, seed=cfg.seed,
            state_dict=cand.state.entries,
        )
        size = effective_size(student, cand.masks)
        final_record = state.history[cand.best_epoch - 1]

    report = RunReport(
        name=cfg.name,
        strategy=cfg.strategy,
        dataset=cfg.dataset,
        seed=cfg.seed,
        metric_family="accuracy" if student.spec.task == "classification" else "regression",
        epochs=state.epoch,
        feature_group=cfg.feature_group,
        winning_round=ticket.round if ticket else None,
        winning_sparsity=ticket.sparsity if ticket else None,
        winning_metric=ticket.metric if ticket else None,
        final_accuracy=final_record.val_accuracy if final_record else None,
        final_mae=final_record.val_mae if final_record else None,
        final_mse=final_record.val_mse if final_record else None,
        total_params=size.total_params if size else None,
        surviving_params=size.surviving_params if size else None,
        size_reduction=size.reduction_fraction if size else None,
        energy_total_j=energy_joules(plog),
        energy_train_j=energy_joules(plog, "train"),
        energy_inference_j=energy_joules(plog, "inference"),
        metrics_csv=metrics_path,
        checkpoint=ticket_path,
        power_log=power_path,
        resolved_config=os.path.join(out_dir, "resolved.cfg"),
    )
    report.to_json(os.path.join(out_dir, "summary.json"))
    return report


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    if args.out is not None:
        cfg = cfg.with_overrides(out_dir=args.out)
    cfg.validate()
    if args.dry_run:
        print_schedule(cfg)
        return 0
    report = execute_run(cfg)
    print(f"run complete: {cfg.name}")
    if report.winning_sparsity is not None:
        print(
            f"winning ticket: round {report.winning_round} at "
            f"{100 * report.winning_sparsity:.1f}% sparsity, metric {report.winning_metric:.4f}"
        )
    if report.size_reduction is not None:
        print(
            f"size: {report.surviving_params}/{report.total_params} params "
            f"({100 * report.size_reduction:.1f}% reduction; reference claim "
            f"{100 * report.reference_size_reduction:.0f}%)"
        )
    print(f"energy: {report.energy_total_j:.1f} J   outputs: {cfg.out_dir}")
    return 0


def _cmd_compare(args) -> int:
    reports = [RunReport.from_json(p) for p in args.reports]
    table = compare_reports(reports)
    if args.format == "csv":
        print(comparison_csv(table), end="")
    else:
        print(comparison_text(table))
    return 0


def _cmd_power_report(args) -> int:
    print(power_report_text(read_power_log(args.log)))
    return 0


def _cmd_presets(args) -> int:
    from importlib import resources

    for item in sorted(resources.files("distillprune").joinpath("presets").iterdir()):
        if item.name.endswith(".cfg"):
            print(item.name[:-4])
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="distillprune",
        description="Distill a teacher into an iteratively channel-pruned student.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config or preset")
    p_run.add_argument("config", help="config file path or bundled preset name")
    p_run.add_argument("--dry-run", action="store_true", help="print the resolved schedule and exit")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None, help="output directory override")
    p_run.set_defaults(func=_cmd_run)

    p_cmp = sub.add_parser("compare", help="tabulate runs against the first (baseline) report")
    p_cmp.add_argument("reports", nargs="+", help="summary.json paths")
    p_cmp.add_argument("--format", choices=("text", "csv"), default="text")
    p_cmp.set_defaults(func=_cmd_compare)

    p_pow = sub.add_parser("power-report", help="summarize a power log CSV")
    p_pow.add_argument("log")
    p_pow.set_defaults(func=_cmd_power_report)

    p_pre = sub.add_parser("presets", help="list bundled presets")
    p_pre.set_defaults(func=_cmd_presets)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
