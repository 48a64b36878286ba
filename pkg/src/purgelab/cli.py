"""Command-line surface: preprocess, gen, train, eval, sweep, stats, export.

Every flag has a default and every run writes a flat key=value manifest next
to its outputs; rerunning a command with ``--config <manifest>`` restores all
flags (explicit flags still win), reproducing the outputs bit for bit. Exit
codes: 0 on success, 2 on usage errors (nothing written), 1 on domain errors
with a machine-parsable ``ERROR <name>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .data import (
    FeatureSpec,
    HashingFeatures,
    dedup,
    generate_synthetic,
    ingest,
    load_feature_table,
    split,
    write_corpus,
    write_feature_table,
)
from .errors import ConfigError, PurgelabError
from .evaluation import (
    distance_stats,
    evaluate,
    export_embeddings,
    pair_distances,
    permutation_pvalue,
    sweep,
)
from .losses import LossConfig
from .trainer import (
    LOSS_KINDS,
    TrainConfig,
    load_checkpoint,
    resume,
    save_checkpoint,
    train,
)

_TRAIN_DEFAULTS = TrainConfig()
_LOSS_DEFAULTS = LossConfig()


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_config_file(path) -> dict[str, str]:
    """Read a flat ``key = value`` manifest into a string map."""
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def write_manifest(path, command: str, args: argparse.Namespace) -> None:
    skip = {"config", "func"}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"command = {command}\n")
        for key in sorted(vars(args)):
            if key in skip:
                continue
            fh.write(f"{key} = {_fmt(getattr(args, key))}\n")


class _Args:
    """add_argument wrapper that lets a config file override built-in defaults."""

    def __init__(self, parser: argparse.ArgumentParser, file_defaults: dict[str, str]):
        self.parser = parser
        self.file_defaults = file_defaults

    def add(self, *names, dest=None, type=str, default=None, **kwargs):
        if dest is None:
            dest = names[-1].lstrip("-").replace("-", "_")
        raw = self.file_defaults.get(dest)
        if raw is not None:
            default = None if raw == "none" else type(raw)
        self.parser.add_argument(*names, dest=dest, type=type, default=default, **kwargs)

    def flag(self, *names, dest=None, default=False, **kwargs):
        if dest is None:
            dest = names[-1].lstrip("-").replace("-", "_")
        raw = self.file_defaults.get(dest)
        if raw is not None:
            default = bool(int(raw))
        self.parser.add_argument(*names, dest=dest, action="store_true", default=default, **kwargs)


def _add_train_flags(args: _Args) -> None:
    d = _TRAIN_DEFAULTS
    l = _LOSS_DEFAULTS
    args.add("--loss-kind", choices=LOSS_KINDS, default=d.loss_kind,
             help=f"training objective (default {d.loss_kind})")
    args.add("--gamma", type=float, default=l.gamma, help="verge EMA smoothing factor")
    args.add("--alpha", type=float, default=l.alpha, help="equivalent-side hinge exponent")
    args.add("--beta", type=float, default=l.beta, help="non-equivalent-side hinge exponent")
    args.add("--zeta", type=float, default=l.zeta, help="hinge margin (may be negative)")
    args.add("--lambda", dest="lam", type=float, default=l.lam, help="metric-loss weight")
    args.add("--hinge-epsilon", type=float, default=l.hinge_epsilon,
             help="derivative guard for fractional hinge exponents")
    args.add("--epochs", type=int, default=d.epochs)
    args.add("--batch", dest="batch_size", type=int, default=d.batch_size)
    args.add("--feature-dim", type=int, default=d.feature_dim)
    args.add("--hidden-dim", type=int, default=d.hidden_dim)
    args.add("--embed-dim", type=int, default=d.embed_dim)
    args.add("--pair-hidden-dim", type=int, default=d.pair_hidden_dim)
    args.add("--step-size", type=float, default=d.step_size, help="optimizer step size")
    args.add("--beta1", type=float, default=d.beta1, help="first-moment decay")
    args.add("--beta2", type=float, default=d.beta2, help="second-moment decay")
    args.add("--adam-epsilon", type=float, default=d.adam_epsilon)
    args.add("--seed", type=int, default=d.seed)


def _train_config(ns: argparse.Namespace) -> TrainConfig:
    loss = LossConfig(
        gamma=ns.gamma,
        alpha=ns.alpha,
        beta=ns.beta,
        zeta=ns.zeta,
        lam=ns.lam,
        hinge_epsilon=ns.hinge_epsilon,
    )
    return TrainConfig(
        loss_kind=ns.loss_kind,
        loss=loss,
        epochs=ns.epochs,
        batch_size=ns.batch_size,
        feature_dim=ns.feature_dim,
        hidden_dim=ns.hidden_dim,
        embed_dim=ns.embed_dim,
        pair_hidden_dim=ns.pair_hidden_dim,
        step_size=ns.step_size,
        beta1=ns.beta1,
        beta2=ns.beta2,
        adam_epsilon=ns.adam_epsilon,
        seed=ns.seed,
    )


def _provider(ns: argparse.Namespace):
    if getattr(ns, "features", None):
        table = load_feature_table(ns.features)
        if table.dim != ns.feature_dim:
            raise ConfigError(
                f"feature table dim {table.dim} does not match --feature-dim {ns.feature_dim}"
            )
        return table
    return HashingFeatures(FeatureSpec(dim=ns.feature_dim))


def _outpath(ns: argparse.Namespace, name: str) -> str:
    os.makedirs(ns.out_dir, exist_ok=True)
    return os.path.join(ns.out_dir, name)


def _write_history(path, history) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in history:
            fh.write(
                f"{e.epoch}\t{e.ce_loss!r}\t{e.metric_loss!r}\t{e.joint_loss!r}\t{e.skipped_count}\n"
            )


def _metric_line(name: str, value) -> str:
    return f"{name} = {_fmt(value)}\n"


def _parse_range(text: str) -> list[float]:
    """Parse START:STOP:STEP into an inclusive grid axis."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"range must be START:STOP:STEP, got {text!r}")
    try:
        start, stop, step = (float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"range must be numeric, got {text!r}") from None
    if step <= 0.0 or stop < start:
        raise ConfigError(f"range needs step > 0 and stop >= start, got {text!r}")
    count = int(round((stop - start) / step)) + 1
    return [round(start + i * step, 9) for i in range(count)]


def _parse_classes(text: str) -> list[int] | None:
    if not text:
        return None
    try:
        return [int(part) for part in text.split(",")]
    except ValueError:
        raise ConfigError(f"--classes must be comma-separated integers, got {text!r}") from None


def cmd_gen(ns: argparse.Namespace) -> int:
    corpus, table = generate_synthetic(
        mode=ns.mode,
        n_classes=ns.classes,
        per_class=ns.per_class,
        equiv_fraction=ns.equiv_fraction,
        noise=ns.noise,
        seed=ns.seed,
        feature_dim=ns.feature_dim,
    )
    write_corpus(corpus, _outpath(ns, "corpus.tsv"))
    if table is not None:
        write_feature_table(table, _outpath(ns, "features.tsv"))
    write_manifest(_outpath(ns, "manifest.txt"), "gen", ns)
    print(f"gen: {len(corpus)} records, {ns.classes} classes -> {ns.out_dir}")
    return 0


def cmd_preprocess(ns: argparse.Namespace) -> int:
    corpus = ingest(ns.input)
    deduped = dedup(corpus)
    train_side, test_side = split(deduped, ns.fraction, ns.seed)
    write_corpus(train_side, _outpath(ns, "train.tsv"))
    write_corpus(test_side, _outpath(ns, "test.tsv"))
    write_manifest(_outpath(ns, "manifest.txt"), "preprocess", ns)
    print(
        f"preprocess: {len(corpus)} in, {len(deduped)} after dedup, "
        f"{len(train_side)}/{len(test_side)} train/test -> {ns.out_dir}"
    )
    return 0


def cmd_train(ns: argparse.Namespace) -> int:
    corpus = ingest(ns.corpus)
    provider = _provider(ns)
    if ns.resume:
        state = load_checkpoint(ns.resume)
        state.config = replace(state.config, epochs=ns.epochs)
        result = resume(state, corpus, provider, collect_steps=ns.trace)
    else:
        result = train(_train_config(ns), corpus, provider, collect_steps=ns.trace)
    save_checkpoint(result.state, _outpath(ns, "checkpoint.bin"))
    _write_history(_outpath(ns, "history.tsv"), result.history)
    if ns.trace and result.step_trace is not None:
        with open(_outpath(ns, "steps.tsv"), "w", encoding="utf-8", newline="\n") as fh:
            for i, s in enumerate(result.step_trace):
                fh.write(f"{i}\t{s.ce_loss!r}\t{s.metric_loss!r}\t{s.joint_loss!r}\t{s.skipped_count}\n")
    write_manifest(_outpath(ns, "manifest.txt"), "train", ns)
    last = result.history[-1] if result.history else None
    if last is not None:
        print(
            f"train: {ns.loss_kind} epoch {last.epoch} "
            f"ce {last.ce_loss:.6f} metric {last.metric_loss:.6f} joint {last.joint_loss:.6f}"
        )
    else:
        print("train: nothing to do (checkpoint already at target epochs)")
    return 0


def cmd_eval(ns: argparse.Namespace) -> int:
    state = load_checkpoint(ns.checkpoint)
    ns.feature_dim = state.config.feature_dim
    corpus = ingest(ns.corpus)
    report = evaluate(state, corpus, _provider(ns))
    path = _outpath(ns, "report.txt")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key in ("tp", "fp", "tn", "fn", "precision", "recall", "f1"):
            fh.write(_metric_line(key, getattr(report, key)))
    write_manifest(_outpath(ns, "manifest.txt"), "eval", ns)
    print(
        "eval: "
        + " ".join(
            f"{k}={_fmt(getattr(report, k))}" for k in ("tp", "fp", "tn", "fn", "precision", "recall", "f1")
        )
    )
    return 0


def cmd_stats(ns: argparse.Namespace) -> int:
    state = load_checkpoint(ns.checkpoint)
    ns.feature_dim = state.config.feature_dim
    corpus = ingest(ns.corpus)
    provider = _provider(ns)
    stats = distance_stats(state, corpus, provider)
    lines = [
        ("n_eq", stats.n_eq),
        ("mean_eq", stats.mean_eq),
        ("std_eq", stats.std_eq),
        ("n_noneq", stats.n_noneq),
        ("mean_noneq", stats.mean_noneq),
        ("std_noneq", stats.std_noneq),
        ("ratio", stats.ratio),
    ]
    if ns.baseline:
        base_state = load_checkpoint(ns.baseline)
        base_stats = distance_stats(base_state, corpus, provider)
        _, noneq = pair_distances(state, corpus, provider)
        _, base_noneq = pair_distances(base_state, corpus, provider)
        test = permutation_pvalue(noneq, base_noneq, resamples=ns.resamples, seed=ns.stats_seed)
        lines += [
            ("baseline_mean_eq", base_stats.mean_eq),
            ("baseline_mean_noneq", base_stats.mean_noneq),
            ("baseline_ratio", base_stats.ratio),
            ("noneq_mean_shift", test.observed_diff),
            ("p_value", test.p_value),
            ("resamples", test.resamples),
        ]
    path = _outpath(ns, "stats.txt")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in lines:
            fh.write(_metric_line(key, value))
    write_manifest(_outpath(ns, "manifest.txt"), "stats", ns)
    print("stats: " + " ".join(f"{k}={_fmt(v)}" for k, v in lines))
    return 0


def _pct(value) -> str:
    return "  --  " if value is None else f"{100.0 * value:6.2f}"


def cmd_sweep(ns: argparse.Namespace) -> int:
    train_corpus = ingest(ns.train_corpus)
    test_corpus = ingest(ns.test_corpus)
    provider = _provider(ns)
    lambda_values = _parse_range(ns.lambda_range)
    zeta_values = _parse_range(ns.zeta_range)
    grid = sweep(
        _train_config(ns),
        train_corpus,
        test_corpus,
        provider,
        lambda_values,
        zeta_values,
        workers=ns.workers,
    )
    with open(_outpath(ns, "sweep.tsv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# lambda\tzeta\tprecision\trecall\tf1\n")
        for cell in grid.cells:
            r = cell.report
            fh.write(
                f"{cell.lam!r}\t{cell.zeta!r}\t"
                f"{_fmt(r.precision if r else None)}\t"
                f"{_fmt(r.recall if r else None)}\t"
                f"{_fmt(r.f1 if r else None)}\n"
            )
    with open(_outpath(ns, "sweep_matrix.txt"), "w", encoding="utf-8", newline="\n") as fh:
        header = "lambda\\zeta |" + "".join(f" {z:^22.2f} |" for z in zeta_values)
        fh.write(header + "\n")
        fh.write("-" * len(header) + "\n")
        for i, lam in enumerate(lambda_values):
            row = f"{lam:^11.2f} |"
            for j in range(len(zeta_values)):
                r = grid.cell(i, j).report
                if r is None:
                    row += f" {'diverged':^22} |"
                else:
                    row += f" P{_pct(r.precision)} R{_pct(r.recall)} F{_pct(r.f1)} |"
            fh.write(row + "\n")
        best = grid.best()
        if best is not None:
            fh.write(
                f"\nbest: lambda={best.lam!r} zeta={best.zeta!r} "
                f"P={_fmt(best.report.precision)} R={_fmt(best.report.recall)} "
                f"F1={_fmt(best.report.f1)}\n"
            )
    errors = [c for c in grid.cells if c.error]
    if errors:
        with open(_outpath(ns, "sweep_errors.txt"), "w", encoding="utf-8", newline="\n") as fh:
            for cell in errors:
                fh.write(f"{cell.lam!r}\t{cell.zeta!r}\t{cell.error}\n")
    write_manifest(_outpath(ns, "manifest.txt"), "sweep", ns)
    best = grid.best()
    print(
        f"sweep: {len(grid.cells)} cells"
        + (
            f", best lambda={best.lam!r} zeta={best.zeta!r} f1={_fmt(best.report.f1)}"
            if best is not None
            else ""
        )
    )
    return 0


def cmd_export(ns: argparse.Namespace) -> int:
    state = load_checkpoint(ns.checkpoint)
    ns.feature_dim = state.config.feature_dim
    corpus = ingest(ns.corpus)
    rows = export_embeddings(state, corpus, _provider(ns), _parse_classes(ns.classes))
    with open(_outpath(ns, "embeddings.tsv"), "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            class_id, label, role, *components = row
            comp_text = "\t".join(repr(c) for c in components)
            fh.write(f"{class_id}\t{label}\t{role}\t{comp_text}\n")
    write_manifest(_outpath(ns, "manifest.txt"), "export", ns)
    print(f"export: {len(rows)} rows -> {ns.out_dir}")
    return 0


def build_parser(file_defaults: dict[str, str]) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="purgelab",
        description="Equivalent-mutant detection lab: cluster purge loss training and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def subparser(name, help_text):
        p = sub.add_parser(name, help=help_text)
        a = _Args(p, file_defaults)
        a.add("--config", type=str, default=None, help="preload flags from a manifest file")
        a.add("--out-dir", type=str, default="out", help="directory for outputs")
        return p, a

    p, a = subparser("gen", "generate a synthetic mutant corpus")
    a.add("--mode", choices=("geometric", "codegen"), default="geometric")
    a.add("--classes", type=int, default=8, help="number of mutant classes")
    a.add("--per-class", type=int, default=40, help="mutants per class")
    a.add("--equiv-fraction", type=float, default=0.5)
    a.add("--noise", type=float, default=1.0, help="geometric scatter magnitude")
    a.add("--seed", type=int, default=0)
    a.add("--feature-dim", type=int, default=_TRAIN_DEFAULTS.feature_dim)
    p.set_defaults(func=cmd_gen)

    p, a = subparser("preprocess", "ingest, dedup, and stratified-split a corpus")
    a.add("--input", type=str, default="corpus.tsv")
    a.add("--fraction", type=float, default=0.5, help="train-side fraction")
    a.add("--seed", type=int, default=0)
    p.set_defaults(func=cmd_preprocess)

    p, a = subparser("train", "train a model on a corpus")
    a.add("--corpus", type=str, default="corpus.tsv")
    a.add("--features", type=str, default=None, help="feature table (default: hashed features)")
    a.add("--resume", type=str, default=None, help="checkpoint to continue from")
    a.flag("--trace", help="also write per-step loss trace")
    _add_train_flags(a)
    p.set_defaults(func=cmd_train)

    p, a = subparser("eval", "evaluate a checkpoint on a corpus")
    a.add("--checkpoint", type=str, default="out/checkpoint.bin")
    a.add("--corpus", type=str, default="corpus.tsv")
    a.add("--features", type=str, default=None)
    p.set_defaults(func=cmd_eval)

    p, a = subparser("sweep", "grid-search lambda and zeta")
    a.add("--train-corpus", type=str, default="train.tsv")
    a.add("--test-corpus", type=str, default="test.tsv")
    a.add("--features", type=str, default=None)
    a.add("--lambda-range", type=str, default="1.00:1.30:0.05", help="START:STOP:STEP")
    a.add("--zeta-range", type=str, default="-0.06:0.01:0.01", help="START:STOP:STEP")
    a.add("--workers", type=int, default=1, help="parallel sweep workers")
    _add_train_flags(a)
    p.set_defaults(func=cmd_sweep)

    p, a = subparser("stats", "distance distribution stats, optionally vs a baseline")
    a.add("--checkpoint", type=str, default="out/checkpoint.bin")
    a.add("--baseline", type=str, default=None, help="baseline checkpoint to compare against")
    a.add("--corpus", type=str, default="corpus.tsv")
    a.add("--features", type=str, default=None)
    a.add("--resamples", type=int, default=10_000)
    a.add("--stats-seed", type=int, default=0, help="permutation test seed")
    p.set_defaults(func=cmd_stats)

    p, a = subparser("export", "export embeddings for external plotting")
    a.add("--checkpoint", type=str, default="out/checkpoint.bin")
    a.add("--corpus", type=str, default="corpus.tsv")
    a.add("--features", type=str, default=None)
    a.add("--classes", type=str, default="", help="comma-separated class ids (default all)")
    p.set_defaults(func=cmd_export)

    return parser


def _peek_config(argv) -> dict[str, str]:
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            return load_config_file(argv[i + 1])
        if arg.startswith("--config="):
            return load_config_file(arg.split("=", 1)[1])
    return {}


def run(argv) -> int:
    try:
        file_defaults = _peek_config(argv)
        parser = build_parser(file_defaults)
        try:
            ns = parser.parse_args(argv)
        except SystemExit as exc:
            return int(exc.code or 0)
        return ns.func(ns)
    except PurgelabError as exc:
        print(f"ERROR {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"ERROR {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
