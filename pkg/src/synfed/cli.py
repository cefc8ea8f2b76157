"""Command-line entry points.

Every subcommand is a thin wrapper over module operations; no pipeline
logic lives here.  Inspection commands (``fingerprint``, ``plan``, ``split``,
``stats``, ``report``) print to stdout; action commands write files and print
the paths they produced.

Experiment definitions are TOML files::

    seed = 0
    output = "runs/toy2site"
    arms = ["syn-real", "real"]

    [sites]
    site-a = "data/site-a"
    site-b = "data/site-b"

``sites`` maps site ids to dataset directories and ``output`` names the run
directory; both are resolved relative to the config file.  All remaining
top-level keys are federation settings (see ``FederationConfig``); unknown
keys are hard errors so that typos cannot silently change an experiment.

Exit codes: 0 on success, 1 on usage errors, 2 on data or validation errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - version-dependent import
    import tomli as tomllib

from .core import (
    DataError,
    Dataset,
    PatientRecord,
    canonical_json,
    fingerprint_dataset,
    load_dataset,
    make_fold_splits,
    save_dataset,
)
from .federation import (
    FederationConfig,
    compute_stats,
    finetune_at_site,
    merge_bundles,
    pretrain_general,
    run_experiment,
    run_site_pipeline,
    score_items,
    summarize_metric_rows,
    validate_bundle,
)
from .memfilter import (
    ToyEmbeddingProvider,
    calibrate_threshold,
    dataset_image_refs,
    filter_synthetic,
)
from .metrics import read_metric_report
from .planner import (
    derive_budget,
    derive_gan_plan,
    derive_seg_plan,
    plan_document,
    plan_hash,
    read_plan_file,
    write_plan_file,
)
from .trainers import (
    ReferenceGenerator,
    fit_generator,
    load_generator,
    load_segmenter,
    sample,
    save_generator,
    save_segmenter,
)


class UsageError(Exception):
    """Bad command line (unknown subcommand, missing or invalid flags)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Experiment configuration files
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """A parsed experiment definition: where the data lives, where results
    go, and every federation setting."""

    site_paths: dict[str, Path]
    output: Path
    federation: FederationConfig

    @classmethod
    def from_toml(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise DataError(f"invalid TOML in {path}: {exc}") from exc

        sites_tbl = raw.pop("sites", None)
        if not isinstance(sites_tbl, dict) or not sites_tbl:
            raise DataError(
                "config needs a [sites] table mapping site ids to dataset directories"
            )
        output = raw.pop("output", None)
        if not isinstance(output, str) or not output:
            raise DataError("config needs an 'output' run-directory path")

        base = path.resolve().parent
        site_paths: dict[str, Path] = {}
        for sid, rel in sites_tbl.items():
            if not isinstance(rel, str):
                raise DataError(f"dataset path for site {sid!r} must be a string")
            p = Path(rel)
            site_paths[sid] = p if p.is_absolute() else base / p
        for sid, p in site_paths.items():
            if not (p / "manifest.json").is_file():
                raise DataError(f"dataset directory for site {sid!r} not found: {p}")

        federation = FederationConfig.from_dict(
            {**raw, "sites": sorted(site_paths)})
        out = Path(output)
        return cls(site_paths=site_paths,
                   output=out if out.is_absolute() else base / out,
                   federation=federation)


def _load_site_datasets(cfg: ExperimentConfig) -> dict[str, Dataset]:
    datasets = {}
    for sid, p in sorted(cfg.site_paths.items()):
        ds = load_dataset(p)
        if ds.site_id != sid:
            raise DataError(
                f"dataset at {p} belongs to site {ds.site_id!r}, "
                f"but the config lists it under {sid!r}"
            )
        datasets[sid] = ds
    return datasets


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def _cmd_fingerprint(args) -> int:
    fp = fingerprint_dataset(load_dataset(args.dataset))
    print(canonical_json(fp.to_dict()), end="")
    return 0


def _cmd_plan(args) -> int:
    fp = fingerprint_dataset(load_dataset(args.dataset))
    seg = derive_seg_plan(fp)
    gan = derive_gan_plan(seg)
    budget = derive_budget(fp, epochs=args.epochs)
    doc = canonical_json(plan_document(seg, gan, budget))
    if args.out:
        write_plan_file(args.out, seg, gan, budget)
        print(args.out)
    else:
        print(doc, end="")
    return 0


def _cmd_split(args) -> int:
    ds = load_dataset(args.dataset)
    folds = [
        {
            "fold": s.fold_index,
            "train": sorted(s.train_patients),
            "val": sorted(s.val_patients),
            "test": sorted(s.test_patients),
        }
        for s in make_fold_splits(ds, args.seed)
    ]
    print(canonical_json(folds), end="")
    return 0


def _cmd_train_gen(args) -> int:
    ds = load_dataset(args.dataset)
    fp = fingerprint_dataset(ds)
    seg = derive_seg_plan(fp)
    budget = derive_budget(fp, epochs=args.epochs)
    gen = ReferenceGenerator(derive_gan_plan(seg), budget, seed=args.seed,
                             grid=args.grid, noise_amplitude=args.noise)
    fit_generator(gen, ds.images())
    save_generator(gen, args.out, plan_hash(seg))
    write_plan_file(Path(args.out).with_suffix(".plan.json"), seg,
                    derive_gan_plan(seg), budget)
    print(args.out)
    return 0


def _cmd_synthesize(args) -> int:
    seg, gan, budget = read_plan_file(args.plan)
    gen = load_generator(args.generator, gan, budget)
    n = args.count if args.count is not None else budget.n_gen
    images = sample(gen, n, seed=args.seed)
    ds = Dataset(
        site_id=args.site_id,
        patients=tuple(
            PatientRecord(f"{args.site_id}-syn{i:05d}", ((img, None),))
            for i, img in enumerate(images)
        ),
        modality="synthetic",
        num_classes=args.num_classes,
    )
    save_dataset(ds, args.out)
    print(args.out)
    return 0


def _cmd_filter(args) -> int:
    syn = load_dataset(args.synthetic)
    real = load_dataset(args.real)
    provider = ToyEmbeddingProvider()
    cal = calibrate_threshold(real, provider, p=args.percentile, seed=args.seed)
    report = filter_synthetic(list(syn.images()), real, cal, provider,
                              syn_refs=dataset_image_refs(syn))
    report.to_csv(args.report)
    kept = {e[0] for e in report.entries if e[3] == "kept"}
    if args.keep_dir:
        patients = []
        for pat in syn.patients:
            items = tuple(item for idx, item in enumerate(pat.items)
                          if f"{pat.patient_id}/{idx}" in kept)
            if items:
                patients.append(PatientRecord(pat.patient_id, items))
        if not patients:
            raise DataError("memorization filter discarded every image")
        save_dataset(Dataset(site_id=syn.site_id, patients=tuple(patients),
                             modality=syn.modality,
                             num_classes=syn.num_classes), args.keep_dir)
    print(f"kept {len(kept)} of {len(report.entries)} "
          f"(threshold {cal.threshold!r})")
    return 0


def _cmd_bundle(args) -> int:
    ds = load_dataset(args.dataset)
    config = FederationConfig(
        sites=(ds.site_id,),
        seed=args.seed,
        arms=("syn",),
        percentile=args.percentile,
        local_epochs=args.epochs,
    )
    bundle_dir = run_site_pipeline(args.run, ds, args.fold, config)
    validate_bundle(bundle_dir)
    print(bundle_dir)
    return 0


def _cmd_merge(args) -> int:
    merged = merge_bundles(args.bundles, out_dir=args.out)
    print(f"{args.out}: {merged.n_patients} patients, {merged.n_images} images")
    return 0


def _cmd_pretrain(args) -> int:
    ds = load_dataset(args.dataset)
    config = FederationConfig(sites=(ds.site_id,), seed=args.seed,
                              pretrain_epochs=args.epochs,
                              pretrain_base_rate=args.base_rate)
    model, seg, gan, budget = pretrain_general(ds, config)
    save_segmenter(model, args.out)
    plan_out = args.plan_out or str(Path(args.out).with_suffix(".plan.json"))
    write_plan_file(plan_out, seg, gan, budget)
    print(args.out)
    print(plan_out)
    return 0


def _cmd_finetune(args) -> int:
    seg, _, _ = read_plan_file(args.plan)
    model = load_segmenter(args.model, seg)
    ds = load_dataset(args.dataset)
    config = FederationConfig(sites=(ds.site_id,), seed=args.seed,
                              finetune_epochs=args.epochs,
                              finetune_base_rate=args.base_rate)
    tuned = finetune_at_site(model, ds.labeled_items(), config)
    save_segmenter(tuned, args.out, seg_plan_hash=plan_hash(seg))
    print(args.out)
    return 0


def _cmd_evaluate(args) -> int:
    seg, _, _ = read_plan_file(args.plan)
    model = load_segmenter(args.model, seg)
    ds = load_dataset(args.dataset)
    items = ds.labeled_items()
    if not items:
        raise DataError("evaluation dataset has no labeled images")
    ds_value, hd_value = score_items(model, items)
    hd_text = "n/a" if hd_value is None else f"{hd_value:.4f}"
    print(f"ds={ds_value:.4f} hd95={hd_text} n_images={len(items)}")
    return 0


def _cmd_stats(args) -> int:
    rows = read_metric_report(args.report)
    stat_rows = compute_stats(rows, alpha=args.alpha)
    if not stat_rows:
        print("no comparison available (need syn-real and real arms)")
        return 0
    for s in stat_rows:
        verdict = "significant" if s.significant else "not significant"
        print(f"{s.comparison} {s.metric}: n={s.n_pairs} "
              f"W={s.outcome.statistic!r} p={s.outcome.p_value!r} "
              f"threshold={s.threshold!r} -> {verdict}")
    return 0


def _cmd_experiment_run(args) -> int:
    cfg = ExperimentConfig.from_toml(args.config)
    federation = cfg.federation
    if args.seed is not None:
        federation = FederationConfig.from_dict(
            {**federation.to_dict(), "seed": args.seed})
    out = Path(args.out) if args.out else cfg.output
    datasets = _load_site_datasets(cfg)
    result = run_experiment(federation, datasets, out)
    for key in ("run_dir", "metrics_csv", "summary_txt", "stats_csv",
                "stats_txt"):
        print(f"{key}: {result[key]}")
    return 0


def _cmd_report(args) -> int:
    run_dir = Path(args.run)
    config_path = run_dir / "config.json"
    metrics_path = run_dir / "reports" / "metrics.csv"
    if not config_path.is_file() or not metrics_path.is_file():
        raise DataError(f"{run_dir} is not a completed run directory")
    config = FederationConfig.from_dict(
        json.loads(config_path.read_text(encoding="utf-8")))
    rows = read_metric_report(metrics_path)
    print(summarize_metric_rows(rows))
    print()
    stat_rows = compute_stats(rows, alpha=config.alpha)
    if stat_rows:
        for s in stat_rows:
            verdict = "significant" if s.significant else "not significant"
            print(f"{s.comparison} {s.metric}: n={s.n_pairs} "
                  f"p={s.outcome.p_value!r} threshold={s.threshold!r} "
                  f"-> {verdict}")
    else:
        print("no comparison available (need syn-real and real arms)")
    return 0


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------


def _add_seed(p: argparse.ArgumentParser, default: int | None = 0) -> None:
    p.add_argument("--seed", type=int, default=default,
                   help="base seed for every random choice")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="synfed",
                     description="Distributed learning via shared synthetic "
                                 "segmentation data.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("fingerprint", help="print dataset summary statistics")
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=_cmd_fingerprint)

    p = sub.add_parser("plan", help="derive architecture and budget from a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--out", help="write plan JSON here instead of stdout")
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("split", help="print patient-level cross-validation folds")
    p.add_argument("--dataset", required=True)
    _add_seed(p)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train-gen", help="fit a generator on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="generator file to write")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--grid", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.05)
    _add_seed(p)
    p.set_defaults(func=_cmd_train_gen)

    p = sub.add_parser("synthesize", help="sample images from a trained generator")
    p.add_argument("--generator", required=True)
    p.add_argument("--plan", required=True, help="plan JSON written alongside the generator")
    p.add_argument("--out", required=True, help="dataset directory to write")
    p.add_argument("--count", type=int, default=None,
                   help="number of images (default: the plan's sampling budget)")
    p.add_argument("--site-id", default="synthetic")
    p.add_argument("--num-classes", type=int, default=1)
    _add_seed(p)
    p.set_defaults(func=_cmd_synthesize)

    p = sub.add_parser("filter", help="drop synthetic images that memorize real ones")
    p.add_argument("--synthetic", required=True)
    p.add_argument("--real", required=True)
    p.add_argument("--report", required=True, help="decision CSV to write")
    p.add_argument("--keep-dir", help="also write the kept subset here")
    p.add_argument("--percentile", type=float, default=5.0)
    _add_seed(p)
    p.set_defaults(func=_cmd_filter)

    p = sub.add_parser("bundle", help="run one site's pipeline and publish its bundle")
    p.add_argument("--dataset", required=True)
    p.add_argument("--run", required=True, help="run directory (resumable)")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--percentile", type=float, default=5.0)
    p.add_argument("--epochs", type=int, default=50)
    _add_seed(p)
    p.set_defaults(func=_cmd_bundle)

    p = sub.add_parser("merge", help="merge validated bundles into one dataset")
    p.add_argument("--out", required=True)
    p.add_argument("bundles", nargs="+", metavar="BUNDLE")
    p.set_defaults(func=_cmd_merge)

    p = sub.add_parser("pretrain", help="train a general model on a merged dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--plan-out", help="plan JSON path (default: <out>.plan.json)")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--base-rate", type=float, default=0.1)
    _add_seed(p)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="adapt a general model to local data")
    p.add_argument("--model", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--base-rate", type=float, default=0.01)
    _add_seed(p)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("evaluate", help="score a model on a labeled dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("stats", help="paired one-sided tests over a metric report")
    p.add_argument("--report", required=True, help="metrics.csv from a run")
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("experiment", help="run a declarative experiment")
    exp_sub = p.add_subparsers(dest="experiment_command", required=True,
                               metavar="action")
    pr = exp_sub.add_parser("run", help="execute an experiment config end to end")
    pr.add_argument("config", help="TOML experiment definition")
    pr.add_argument("--out", help="override the config's output directory")
    _add_seed(pr, default=None)
    pr.set_defaults(func=_cmd_experiment_run)

    p = sub.add_parser("report", help="re-render tables from a completed run")
    p.add_argument("--run", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def cli_dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return int(args.func(args) or 0)
    except (DataError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
