"""Command-line orchestration of the desk-scale experiment matrix.

Subcommands: generate-data, train-teacher, export-soft, train-student,
eval, variance-report, report. All artifacts land under --out, keyed by
the config digest; rerunning any command with the same config and seed
rewrites byte-identical files.

Exit codes: 0 success, 1 numeric failure, 2 usage/config error,
3 data-format error.
"""

import argparse
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ExperimentConfig, load_config
from .datasets import generate_synth, validate_soft_targets
from .distill import DistillLossSpec, export_soft_targets
from .errors import (
    AlignmentError,
    ConfigError,
    FormatError,
    KdtrainError,
    NumericOverflowError,
)
from .feedforward import init_feedforward
from .formats import (
    RunRecord,
    export_manifest_text,
    read_checkpoint,
    read_dataset,
    read_run_record,
    read_soft_targets,
    write_checkpoint,
    write_dataset,
    write_run_record,
    write_soft_targets,
)
from .lstm import init_lstm
from .training import (
    TrainingAborted,
    derive_rng,
    frame_accuracy,
    gradient_variance_report,
    run_training,
)

_SPLITS = ("train", "cv", "test")

# Table-1-style labels for each regime's target arrangement.
_TARGET_LABELS = {
    "hard": "Hard",
    "soft": "Soft",
    "reg": "Soft + Hard",
    "pretrain": "Soft, Hard",
    "logitmatch": "Logits",
}


def _tfmt(t: float) -> str:
    return format(t, "g")


def _teacher_stem(seed: int) -> str:
    return f"teacher_s{seed}"


def _soft_name(t: float, seed: int) -> str:
    return f"soft_T{_tfmt(t)}_s{seed}.dkst"


def _student_stem(regime: str, t: float, seed: int) -> str:
    if regime in ("hard", "logitmatch"):
        return f"student_{regime}_s{seed}"
    return f"student_{regime}_T{_tfmt(t)}_s{seed}"


def _prepare_out(out: Path, cfg: ExperimentConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    digest_file = out / "config.digest"
    digest = cfg.digest()
    if digest_file.exists():
        existing = digest_file.read_text().strip()
        if existing != digest:
            raise ConfigError(
                f"output dir {out} was initialized with config digest {existing[:12]}..., "
                f"current config digests to {digest[:12]}...; use a fresh --out"
            )
    else:
        digest_file.write_text(digest + "\n")


def _load_split(out: Path, name: str):
    path = out / f"dataset_{name}.dkds"
    if not path.exists():
        raise ConfigError(f"missing dataset {path}; run generate-data first")
    return read_dataset(path)


def _expand_cells(regimes, temperatures, seeds):
    cells = []
    for seed in seeds:
        for regime in regimes:
            if regime in ("hard", "logitmatch"):
                cells.append((regime, 1.0, seed))
            else:
                for t in temperatures:
                    cells.append((regime, t, seed))
    return cells


def cmd_generate_data(cfg: ExperimentConfig, out: Path) -> None:
    splits = generate_synth(cfg.task_spec(), cfg.data_seed)
    for name in _SPLITS:
        ds = getattr(splits, name)
        write_dataset(out / f"dataset_{name}.dkds", ds)
        (out / f"manifest_{name}.txt").write_text(export_manifest_text(ds))
        print(f"wrote dataset_{name}.dkds ({ds.total_frames} frames, "
              f"{len(ds.utterances)} utterances)")


def cmd_train_teacher(cfg: ExperimentConfig, out: Path, seeds: list[int]) -> None:
    train = _load_split(out, "train")
    cv = _load_split(out, "cv")
    test = _load_split(out, "test")
    dims = [train.feature_dim] + cfg.teacher_hidden + [train.num_classes]
    for seed in seeds:
        init = init_feedforward(dims, derive_rng(seed, "init"))
        record, params = _guarded_run(
            out,
            _teacher_stem(seed),
            DistillLossSpec("hard", cfg.alpha),
            init,
            train,
            cv,
            schedule=cfg.schedule(cfg.teacher_max_epochs),
            learning_rate=cfg.teacher_learning_rate,
            momentum=cfg.momentum,
            clip_norm=cfg.clip_norm,
            master_seed=seed,
            config_digest=cfg.digest(),
            model_tag="teacher",
        )
        record.test_accuracy = frame_accuracy(params, test)
        write_checkpoint(out / f"{_teacher_stem(seed)}.dkdm", params)
        write_run_record(out / f"{_teacher_stem(seed)}.runrec", record)
        print(
            f"teacher seed {seed}: cv_fa {record.epochs[-1].cv_accuracy:.2f} "
            f"test_fa {record.test_accuracy:.2f} ({len(record.epochs)} epochs)"
        )


def cmd_export_soft(
    cfg: ExperimentConfig,
    out: Path,
    seeds: list[int],
    temperatures: list[float],
    teacher_path: str | None,
) -> None:
    train = _load_split(out, "train")
    for seed in seeds:
        path = Path(teacher_path) if teacher_path else out / f"{_teacher_stem(seed)}.dkdm"
        if not path.exists():
            raise ConfigError(f"missing teacher checkpoint {path}; run train-teacher first")
        teacher = read_checkpoint(path)
        for t in temperatures:
            soft = export_soft_targets(teacher, train, t)
            target = out / _soft_name(t, seed)
            write_soft_targets(target, soft)
            violations = validate_soft_targets(read_soft_targets(target), train)
            if violations:
                raise FormatError(
                    f"exported soft targets {target} failed self-validation: {violations[0]}"
                )
            print(f"wrote {target.name} (T={_tfmt(t)}, {soft.frame_count} frames)")


def _guarded_run(out: Path, stem: str, spec, init, train, cv, **kwargs):
    """run_training, but on numeric abort persist the last good epoch's
    checkpoint and partial record before propagating."""
    try:
        return run_training(spec, init, train, cv, log=print, **kwargs)
    except TrainingAborted as exc:
        write_checkpoint(out / f"{stem}.aborted.dkdm", exc.params)
        write_run_record(out / f"{stem}.aborted.runrec", exc.record)
        print(f"aborted: {exc}; last good epoch saved as {stem}.aborted.*", file=sys.stderr)
        raise


def _train_one_student(cfg: ExperimentConfig, out: Path, regime: str, t: float, seed: int):
    train = _load_split(out, "train")
    cv = _load_split(out, "cv")
    test = _load_split(out, "test")
    layers, cells, projection = cfg.student_shape
    init = init_lstm(
        train.feature_dim,
        train.num_classes,
        layers=layers,
        cells=cells,
        projection=projection,
        rng=derive_rng(seed, "init"),
    )
    spec = DistillLossSpec(regime, cfg.alpha, t)
    soft = None
    teacher = None
    if spec.uses_soft_targets:
        soft_path = out / _soft_name(t, seed)
        if not soft_path.exists():
            raise ConfigError(f"missing soft targets {soft_path}; run export-soft first")
        soft = read_soft_targets(soft_path)
    if regime == "logitmatch":
        teacher_path = out / f"{_teacher_stem(seed)}.dkdm"
        if not teacher_path.exists():
            raise ConfigError(f"missing teacher checkpoint {teacher_path} for logit matching")
        teacher = read_checkpoint(teacher_path)
    stem = _student_stem(regime, t, seed)
    record, params = _guarded_run(
        out,
        stem,
        spec,
        init,
        train,
        cv,
        soft_targets=soft,
        teacher=teacher,
        schedule=cfg.schedule(),
        learning_rate=cfg.learning_rate,
        momentum=cfg.momentum,
        clip_norm=cfg.clip_norm,
        master_seed=seed,
        config_digest=cfg.digest(),
        model_tag="student",
    )
    record.test_accuracy = frame_accuracy(params, test)
    write_checkpoint(out / f"{stem}.dkdm", params)
    write_run_record(out / f"{stem}.runrec", record)
    print(
        f"{stem}: cv_fa {record.epochs[-1].cv_accuracy:.2f} "
        f"test_fa {record.test_accuracy:.2f} ({len(record.epochs)} epochs)"
    )


def _cell_worker(config_path: str | None, out_str: str, regime: str, t: float, seed: int) -> str:
    cfg = load_config(config_path)
    _train_one_student(cfg, Path(out_str), regime, t, seed)
    return _student_stem(regime, t, seed)


def cmd_train_student(
    cfg: ExperimentConfig,
    out: Path,
    config_path: str | None,
    regimes: list[str],
    temperatures: list[float],
    seeds: list[int],
    parallel: int,
) -> None:
    cells = _expand_cells(regimes, temperatures, seeds)
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = [
                pool.submit(_cell_worker, config_path, str(out), regime, t, seed)
                for regime, t, seed in cells
            ]
            for f in futures:
                f.result()
    else:
        for regime, t, seed in cells:
            _train_one_student(cfg, out, regime, t, seed)


def cmd_eval(cfg: ExperimentConfig, out: Path, model_path: str, split: str) -> None:
    if split not in _SPLITS:
        raise ConfigError(f"unknown split {split!r}, choose from {_SPLITS}")
    params = read_checkpoint(model_path)
    ds = _load_split(out, split)
    fa = frame_accuracy(params, ds)
    print(f"frame accuracy on {split}: {fa:.4f}")


def cmd_variance_report(
    cfg: ExperimentConfig, out: Path, seed: int, student_path: str | None
) -> None:
    train = _load_split(out, "train")
    if student_path:
        student = read_checkpoint(student_path)
        origin = student_path
    else:
        layers, cells, projection = cfg.student_shape
        student = init_lstm(
            train.feature_dim,
            train.num_classes,
            layers=layers,
            cells=cells,
            projection=projection,
            rng=derive_rng(seed, "init"),
        )
        origin = "fresh-init"
    lines = [
        "# kdtrain-variance v1",
        f"# seed {seed}",
        f"# student {origin}",
        "# columns targets temperature total first_term",
    ]
    hard = gradient_variance_report(student, train)
    lines.append(f"hard - {hard.total!r} {hard.first_term!r}")
    for t in cfg.temperatures:
        soft_path = out / _soft_name(t, seed)
        if not soft_path.exists():
            raise ConfigError(f"missing soft targets {soft_path}; run export-soft first")
        soft = read_soft_targets(soft_path)
        rep = gradient_variance_report(student, train, soft)
        lines.append(f"soft {_tfmt(t)} {rep.total!r} {rep.first_term!r}")
    text = "\n".join(lines) + "\n"
    (out / f"variance_s{seed}.txt").write_text(text)
    print(text, end="")


def _collect_runs(out: Path) -> list[RunRecord]:
    records = []
    for path in sorted(out.glob("teacher_s*.runrec")) + sorted(out.glob("student_*.runrec")):
        if ".aborted." in path.name:
            continue
        records.append(read_run_record(path))
    return records


def _median(values):
    return statistics.median(values) if values else float("nan")


def cmd_report(cfg: ExperimentConfig, out: Path) -> None:
    records = _collect_runs(out)
    if not records:
        raise ConfigError(f"no completed runs under {out}")

    csv_lines = ["model,regime,temperature,alpha,seed,epochs,tr_fa,cv_fa,test_fa"]
    for r in records:
        last = r.epochs[-1]
        test = "" if r.test_accuracy is None else repr(r.test_accuracy)
        csv_lines.append(
            f"{r.model},{r.regime},{r.temperature!r},{r.alpha!r},{r.seed},"
            f"{len(r.epochs)},{last.train_accuracy!r},{last.cv_accuracy!r},{test}"
        )
    (out / "report.csv").write_text("\n".join(csv_lines) + "\n")

    # Table-1-style summary: one row per (model, regime, T), median over seeds.
    groups: dict[tuple, list[RunRecord]] = {}
    for r in records:
        key_t = r.temperature if r.regime in ("soft", "reg", "pretrain") else None
        groups.setdefault((r.model, r.regime, key_t), []).append(r)

    def sort_key(item):
        (model, regime, t), _ = item
        model_rank = 0 if model == "teacher" else 1
        regime_rank = {"hard": 0, "soft": 1, "reg": 2, "pretrain": 3, "logitmatch": 4}[regime]
        return (model_rank, t if t is not None else 0.0, regime_rank)

    header = f"{'Model':<14} {'Targets':<12} {'TR FA%':>8} {'CV FA%':>8} {'TEST FA%':>9}"
    rows = [header, "-" * len(header)]
    for (model, regime, t), rs in sorted(groups.items(), key=sort_key):
        label = model if model == "teacher" else (
            "student" if t is None else f"student-T{_tfmt(t)}"
        )
        tr = _median([r.epochs[-1].train_accuracy for r in rs])
        cv = _median([r.epochs[-1].cv_accuracy for r in rs])
        te = _median([r.test_accuracy for r in rs if r.test_accuracy is not None])
        rows.append(
            f"{label:<14} {_TARGET_LABELS[regime]:<12} {tr:>8.2f} {cv:>8.2f} {te:>9.2f}"
        )

    variance_files = sorted(out.glob("variance_s*.txt"))
    if variance_files:
        rows.append("")
        rows.append("Gradient variance (fresh student vs teacher targets):")
        for vf in variance_files:
            rows.append(vf.read_text().rstrip())
    table = "\n".join(rows) + "\n"
    (out / "report.txt").write_text(table)
    print(table, end="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kdtrain",
        description="Teacher-student distillation training at desk scale.",
    )
    parser.add_argument("--config", help="experiment YAML (defaults used when omitted)")
    parser.add_argument("--out", default="out", help="artifact directory (default: out)")
    parser.add_argument("--seed", type=int, help="restrict to one master seed")
    parser.add_argument(
        "--deterministic",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="accepted for interface stability; execution is always deterministic",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate-data", help="synthesize train/cv/test datasets")
    sub.add_parser("train-teacher", help="train the feed-forward teacher (hard targets)")

    p = sub.add_parser("export-soft", help="write temperature-softened teacher targets")
    p.add_argument("--temperature", type=float, help="restrict to one temperature")
    p.add_argument("--teacher", help="explicit teacher checkpoint path")

    p = sub.add_parser("train-student", help="train LSTM student cells")
    p.add_argument("--regime", help="restrict to one regime")
    p.add_argument("--temperature", type=float, help="restrict to one temperature")
    p.add_argument("--parallel", type=int, default=1, help="independent cells in N processes")

    p = sub.add_parser("eval", help="frame accuracy of a checkpoint on a split")
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test", choices=_SPLITS)

    p = sub.add_parser("variance-report", help="gradient variance: hard vs soft targets")
    p.add_argument("--student", help="student checkpoint (default: fresh init from --seed)")

    sub.add_parser("report", help="emit the Table-1-style summary and CSV")
    return parser


def _dispatch(args) -> None:
    cfg = load_config(args.config)
    out = Path(args.out)
    _prepare_out(out, cfg)
    seeds = [args.seed] if args.seed is not None else cfg.seeds
    if args.command == "generate-data":
        cmd_generate_data(cfg, out)
    elif args.command == "train-teacher":
        cmd_train_teacher(cfg, out, seeds)
    elif args.command == "export-soft":
        temps = [args.temperature] if args.temperature is not None else cfg.temperatures
        cmd_export_soft(cfg, out, seeds, temps, args.teacher)
    elif args.command == "train-student":
        regimes = [args.regime] if args.regime else cfg.regimes
        bad = [r for r in regimes if r not in _TARGET_LABELS]
        if bad:
            raise ConfigError(f"unknown regime(s) {bad}")
        temps = [args.temperature] if args.temperature is not None else cfg.temperatures
        cmd_train_student(cfg, out, args.config, regimes, temps, seeds, args.parallel)
    elif args.command == "eval":
        cmd_eval(cfg, out, args.model, args.split)
    elif args.command == "variance-report":
        for seed in seeds:
            cmd_variance_report(cfg, out, seed, args.student)
    elif args.command == "report":
        cmd_report(cfg, out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, AlignmentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericOverflowError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 1
    except KdtrainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
