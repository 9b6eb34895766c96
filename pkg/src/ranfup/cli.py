"""Command-line entry point for the HRTF upsampling toolkit.

One executable with subcommands covering the pipeline: synthetic data
generation, bundle validation, measured-direction selection, retrieval,
pretraining, adaptation, upsampling, evaluation, the end-to-end
experiment, and report aggregation.

Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 numerical failure.  Progress is logged as JSON lines on stderr; all
machine-readable outputs are JSON or CSV files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import torch

from . import __version__, baselines, metrics, synth, training
from . import bundle as bundle_mod
from . import model as model_mod
from . import retrieval as retrieval_mod
from .errors import DataError, NumericalError

#: CLI criterion names; "itd" is shorthand for the ITD absolute-error sum.
CLI_CRITERIA = {"lsd": "lsd", "itd": "itd_mae", "random": "random"}


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract wants 1."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _log(event: str, **fields) -> None:
    print(json.dumps({"event": event, **fields}, sort_keys=True), file=sys.stderr)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    file = Path(path)
    if not file.is_file():
        raise DataError(f"config file not found: {file}")
    try:
        return tomllib.loads(file.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise DataError(f"bad TOML in {file}: {exc}") from exc


def _resolve_path(path: str) -> Path:
    """Interpret paths relative to RANFUP_DATA_DIR when they don't exist."""
    p = Path(path)
    if p.exists() or p.is_absolute():
        return p
    data_dir = os.environ.get("RANFUP_DATA_DIR")
    if data_dir and (Path(data_dir) / p).exists():
        return Path(data_dir) / p
    return p


def _pick(args_value, config: dict, key: str, default):
    if args_value is not None:
        return args_value
    if key in config:
        return config[key]
    return default


def _criterion(name: str, seed: int) -> retrieval_mod.RetrievalCriterion:
    if name not in CLI_CRITERIA:
        raise DataError(f"unknown criterion {name!r}; choose from {sorted(CLI_CRITERIA)}")
    return retrieval_mod.RetrievalCriterion(CLI_CRITERIA[name], seed=seed)


def _ranf_config(config: dict, bundle: bundle_mod.HrirBundle, args) -> model_mod.RanfConfig:
    section = dict(config.get("ranf", {}))
    section.setdefault("sample_rate", bundle.sample_rate)
    section.setdefault("hrir_length", bundle.hrir_length)
    if args.k is not None:
        section["k_retrieved"] = args.k
    elif "k_retrieved" not in section:
        section.setdefault("k_retrieved", 5)
    return model_mod.RanfConfig.from_dict({**model_mod.RanfConfig().to_dict(), **section})


def _train_config(config: dict, args) -> training.TrainConfig:
    section = dict(config.get("train", {}))
    for key, arg_name in (
        ("pretrain_epochs", "epochs"),
        ("adapt_epochs", "adapt_epochs"),
        ("learning_rate", "lr"),
        ("batch_size", "batch_size"),
        ("seed", "seed"),
    ):
        value = getattr(args, arg_name, None)
        if value is not None:
            section[key] = value
    return training.TrainConfig.from_dict({**training.TrainConfig().to_dict(), **section})


def _split_for(bundle: bundle_mod.HrirBundle, args, config: dict) -> bundle_mod.DatasetSplit:
    sizes = _pick(getattr(args, "split_sizes", None), config, "split_sizes", None)
    if isinstance(sizes, str):
        parts = [int(x) for x in sizes.split(",")]
        if len(parts) != 3:
            raise DataError("split sizes must be 'pool,validation,eval'")
        sizes = tuple(parts)
    elif isinstance(sizes, list):
        sizes = tuple(int(x) for x in sizes)
    exclusions = _pick(getattr(args, "exclude", None), config, "exclusions", "P0079")
    if isinstance(exclusions, str):
        exclusions = tuple(x for x in exclusions.split(",") if x)
    split_config = bundle_mod.SplitConfig(exclusions=tuple(exclusions), sizes=sizes)
    return bundle_mod.make_split(bundle.subject_ids(), split_config)


def _load_bundle(path: str) -> bundle_mod.HrirBundle:
    return bundle_mod.load_bundle(_resolve_path(path))


# -- subcommand implementations ------------------------------------------------


def _cmd_synth_gen(args, config: dict) -> int:
    grid = _pick(args.grid, config, "grid", "icosphere:2")
    n_subjects = _pick(args.subjects, config, "subjects", 40)
    sample_rate = _pick(args.sample_rate, config, "sample_rate", 48000)
    length = _pick(args.length, config, "length", 256)
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    bundle = synth.generate_bundle(n_subjects, grid, sample_rate, length, seed)
    out = Path(args.out)
    bundle_mod.save_bundle(bundle, out)
    (out / "synth_manifest.json").write_text(
        json.dumps(
            {
                "version": __version__,
                "grid": grid,
                "subjects": n_subjects,
                "sample_rate": sample_rate,
                "length": length,
                "seed": seed,
            },
            indent=1,
            sort_keys=True,
        )
    )
    _log("synth-gen", out=str(out), subjects=n_subjects, grid=grid)
    print(str(out))
    return 0


def _cmd_validate(args, config: dict) -> int:
    del config
    bundle = _load_bundle(args.bundle)
    info = {
        "subjects": len(bundle.subjects),
        "directions": bundle.num_directions,
        "sample_rate_hz": bundle.sample_rate,
        "hrir_length": bundle.hrir_length,
    }
    print(json.dumps(info, sort_keys=True))
    return 0


def _cmd_subset(args, config: dict) -> int:
    bundle = _load_bundle(args.bundle)
    n = _pick(args.n, config, "n_measured", 3)
    subset = bundle_mod.select_measured_subset(bundle.grid, n)
    text = subset.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _cmd_retrieve(args, config: dict) -> int:
    bundle = _load_bundle(args.bundle)
    if args.target not in bundle.subjects:
        raise DataError(f"target {args.target!r} not in bundle")
    n = _pick(args.n, config, "n_measured", 3)
    k = _pick(args.k, config, "k", 5)
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    criterion = _criterion(_pick(args.criterion, config, "criterion", "itd"), seed)
    measured = bundle_mod.select_measured_subset(bundle.grid, n)
    bank = retrieval_mod.FeatureBank(bundle)
    candidates = [sid for sid in bundle.subject_ids() if sid != args.target]
    result = retrieval_mod.retrieve_topk(
        bank,
        candidates,
        args.target,
        bank.magnitudes(args.target, measured.indices),
        bank.itds(args.target, measured.indices),
        measured,
        k,
        criterion,
    )
    text = result.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _cmd_pretrain(args, config: dict) -> int:
    bundle = _load_bundle(args.bundle)
    split = _split_for(bundle, args, config)
    n = _pick(args.n, config, "n_measured", 3)
    criterion = _criterion(
        _pick(args.criterion, config, "criterion", "itd"),
        args.seed if args.seed is not None else config.get("seed", 0),
    )
    ranf_config = _ranf_config(config, bundle, args)
    train_config = _train_config(config, args)
    measured = bundle_mod.select_measured_subset(bundle.grid, n)
    result = training.pretrain(
        bundle, split, measured, criterion, ranf_config, train_config,
        args.out, resume=not args.no_resume,
        log_fn=lambda rec: _log("pretrain", **rec),
    )
    _log("pretrain-done", best=str(result.best_path), best_val=result.best_val_loss)
    print(str(result.best_path))
    return 0


def _cmd_adapt(args, config: dict) -> int:
    bundle = _load_bundle(args.bundle)
    net, sidecar = model_mod.load_model(_resolve_path(args.checkpoint))
    if args.target not in bundle.subjects:
        raise DataError(f"target {args.target!r} not in bundle")
    if args.subset:
        measured = bundle_mod.MeasurementSubset.from_json(Path(args.subset).read_text())
    elif sidecar.get("measured_indices") is not None:
        measured = bundle_mod.MeasurementSubset(tuple(sidecar["measured_indices"]))
    else:
        measured = bundle_mod.select_measured_subset(
            bundle.grid, _pick(args.n, config, "n_measured", 3)
        )
    to_cli_name = {"itd_mae": "itd", "lsd": "lsd", "random": "random"}
    default_criterion = to_cli_name.get(sidecar.get("criterion"), "itd")
    criterion = _criterion(
        _pick(args.criterion, config, "criterion", default_criterion),
        args.seed if args.seed is not None else config.get("seed", 0),
    )
    train_config = _train_config(config, args)
    bank = retrieval_mod.FeatureBank(bundle)
    pool = sidecar.get("train_ids")
    if pool is None:
        pool = [sid for sid in sorted(sidecar["subjects"]) if sid in bundle.subjects]
    missing = [sid for sid in pool if sid not in bundle.subjects]
    if missing:
        raise DataError(f"pool subjects missing from bundle: {missing[:5]}")
    truth = bundle.subjects[args.target]
    result = retrieval_mod.retrieve_topk(
        bank,
        pool,
        args.target,
        bank.magnitudes(args.target, measured.indices),
        bank.itds(args.target, measured.indices),
        measured,
        net.config.k_retrieved,
        criterion,
    )
    losses = training.adapt(
        net, bank, truth, measured, result, train_config,
        log_fn=lambda rec: _log("adapt", **rec),
    )
    retrievals = dict(sidecar.get("retrievals", {}))
    retrievals[args.target] = json.loads(result.to_json())
    model_mod.save_model(
        net,
        Path(args.out),
        {
            "criterion": criterion.kind,
            "criterion_seed": criterion.seed,
            "k": net.config.k_retrieved,
            "measured_indices": list(measured.indices),
            "train_ids": list(pool),
            "train_config": train_config.to_dict(),
            "retrievals": retrievals,
            "version": __version__,
        },
    )
    _log("adapt-done", target=args.target, final_loss=losses[-1] if losses else None)
    print(args.out)
    return 0


def _cmd_upsample(args, config: dict) -> int:
    del config
    bundle = _load_bundle(args.bundle)
    net, sidecar = model_mod.load_model(_resolve_path(args.checkpoint))
    bank = retrieval_mod.FeatureBank(bundle)
    if args.retrieval:
        result = retrieval_mod.RetrievalResult.from_json(Path(args.retrieval).read_text())
    else:
        records = sidecar.get("retrievals", {})
        if args.target not in records:
            raise DataError(
                f"no stored retrieval for {args.target!r}; pass --retrieval"
            )
        result = retrieval_mod.RetrievalResult.from_json(json.dumps(records[args.target]))
    if result.target != args.target:
        raise DataError(
            f"retrieval record is for {result.target!r}, not {args.target!r}"
        )
    pred = model_mod.predict_subject(net, bank, result)
    out = Path(args.out)
    bundle_mod.save_bundle(
        bundle_mod.HrirBundle(
            grid=list(bundle.grid),
            subjects={args.target: pred},
            sample_rate=bundle.sample_rate,
        ),
        out,
    )
    _log("upsample-done", target=args.target, out=str(out))
    print(str(out))
    return 0


def _cmd_evaluate(args, config: dict) -> int:
    del config
    truth_bundle = _load_bundle(args.bundle)
    pred_bundle = _load_bundle(args.pred)
    if args.target not in truth_bundle.subjects:
        raise DataError(f"target {args.target!r} not in truth bundle")
    if args.target not in pred_bundle.subjects:
        raise DataError(f"target {args.target!r} not in prediction bundle")
    measured = None
    if args.subset:
        measured = bundle_mod.MeasurementSubset.from_json(Path(args.subset).read_text())
    report = metrics.evaluate(
        pred_bundle.subjects[args.target],
        truth_bundle.subjects[args.target],
        measured,
        exclude_measured=not args.include_measured,
    )
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _cmd_experiment(args, config: dict) -> int:
    bundle = _load_bundle(args.bundle)
    split = _split_for(bundle, args, config)
    n = _pick(args.n, config, "n_measured", 3)
    criterion = _criterion(
        _pick(args.criterion, config, "criterion", "itd"),
        args.seed if args.seed is not None else config.get("seed", 0),
    )
    ranf_config = _ranf_config(config, bundle, args)
    train_config = _train_config(config, args)
    summary = training.run_experiment(
        bundle, split, n, criterion, ranf_config, train_config, args.out,
        resume=not args.no_resume,
        log_fn=lambda rec: _log("experiment", **rec),
        run_baselines=not args.no_baselines,
    )
    print(json.dumps(summary["methods"]["ranf"]["mean"], sort_keys=True))
    return 0


def _cmd_report(args, config: dict) -> int:
    del config
    rows: dict[str, dict[int, dict]] = {}
    conditions: set[int] = set()
    for run_dir in args.runs:
        summary_path = Path(run_dir) / "summary.json"
        if not summary_path.is_file():
            raise DataError(f"no summary.json under {run_dir}")
        summary = json.loads(summary_path.read_text())
        n = int(summary["condition"]["n_measured"])
        conditions.add(n)
        for method, data in summary["methods"].items():
            rows.setdefault(method, {})[n] = data["mean"]
    ordered = sorted(conditions)
    header = ["method"]
    for n in ordered:
        header += [f"itd_us_n{n}", f"ild_db_n{n}", f"lsd_db_n{n}"]
    lines = [",".join(header)]
    for method in sorted(rows):
        cells = [method]
        for n in ordered:
            mean = rows[method].get(n)
            if mean is None:
                cells += ["", "", ""]
            else:
                cells += [
                    repr(mean["itd_error_us"]),
                    repr(mean["ild_error_db"]),
                    repr(mean["lsd_db"]),
                ]
        lines.append(",".join(cells))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


# -- argument wiring -----------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML config file overriding defaults")
    parser.add_argument("--threads", type=int, default=1,
                        help="torch thread count; 1 guarantees determinism")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ranfup", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-gen", help="generate a synthetic sphere-model bundle")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int)
    p.add_argument("--grid", help="octahedron | icosphere:<level> | fibonacci:<n>")
    p.add_argument("--sample-rate", type=int, dest="sample_rate")
    p.add_argument("--length", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_synth_gen)

    p = sub.add_parser("validate", help="check a bundle against format invariants")
    _add_common(p)
    p.add_argument("--bundle", required=True)
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("subset", help="select measured directions")
    _add_common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_subset)

    p = sub.add_parser("retrieve", help="rank pool subjects for a target")
    _add_common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--criterion", choices=sorted(CLI_CRITERIA))
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_retrieve)

    p = sub.add_parser("pretrain", help="train shared weights over the pool")
    _add_common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="measured directions for retrieval")
    p.add_argument("--k", type=int)
    p.add_argument("--criterion", choices=sorted(CLI_CRITERIA))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--split-sizes", dest="split_sizes",
                   help="pool,validation,eval subject counts")
    p.add_argument("--exclude", help="comma-separated subject ids to drop")
    p.add_argument("--no-resume", action="store_true")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("adapt", help="personalize a pretrained model to a target")
    _add_common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--subset", help="JSON file with measured grid indices")
    p.add_argument("--criterion", choices=sorted(CLI_CRITERIA))
    p.add_argument("--adapt-epochs", type=int, dest="adapt_epochs")
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_adapt)

    p = sub.add_parser("upsample", help="predict a full grid for an adapted target")
    _add_common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--retrieval", help="JSON retrieval record overriding the sidecar")
    p.set_defaults(func=_cmd_upsample)

    p = sub.add_parser("evaluate", help="score a predicted bundle against truth")
    _add_common(p)
    p.add_argument("--bundle", required=True, help="ground-truth bundle")
    p.add_argument("--pred", required=True, help="predicted bundle")
    p.add_argument("--target", required=True)
    p.add_argument("--subset", help="JSON file with measured grid indices")
    p.add_argument("--include-measured", action="store_true", dest="include_measured")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("experiment", help="full protocol for one sparsity condition")
    _add_common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--criterion", choices=sorted(CLI_CRITERIA))
    p.add_argument("--epochs", type=int)
    p.add_argument("--adapt-epochs", type=int, dest="adapt_epochs")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--split-sizes", dest="split_sizes")
    p.add_argument("--exclude")
    p.add_argument("--no-baselines", action="store_true")
    p.add_argument("--no-resume", action="store_true")
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("report", help="aggregate run summaries into one CSV table")
    _add_common(p)
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.set_num_threads(max(1, args.threads))
    try:
        config = _load_config(args.config)
        return args.func(args, config)
    except DataError as exc:
        _log("error", kind="data", message=str(exc))
        return 2
    except NumericalError as exc:
        _log("error", kind="numerical", message=str(exc))
        return 3


if __name__ == "__main__":
    sys.exit(main())
