"""Command-line front end: fit, cv, simulate, sensitivity, predict, print-config.

Configuration comes from an optional JSON file plus flag overrides (flags
win).  Every command is deterministic given the merged configuration.  Exit
codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import crossval, simstudy, vb
from .data import DataError, Dataset, ingest_csv, write_csv
from .hierarchical import HierDomainError
from .modelspec import (BUILTIN_SCHEMAS, ModelFamily, SpecError, enumerate_family,
                        parse_spec, read_spec_file)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

OUTPUT_ROOT_ENV = "LBAVB_OUTPUT_ROOT"

DEFAULTS = {
    "data": None,              # trial CSV path
    "schema": None,            # schema/spec document, or a built-in name
    "model": None,             # spec document with a [model] block (fit/predict)
    "family": None,            # forstmann27 | rae16 | wagenmakers256 (cv/sensitivity)
    "method": "hybrid",        # gvb | hybrid
    "n_factors": 20,           # 15 is the usual choice inside cross-validation folds
    "n_mc": 10,
    "max_iters": 10000,
    "window": 200,
    "patience": 200,
    "folds": 5,
    "draws": 100,              # predictive samples per fold / per predict run
    "seed": 1,
    "out": None,               # default: $LBAVB_OUTPUT_ROOT/<command> or ./<command>
    "parallelism": None,       # worker processes for model screening
    "shortlist": 10,
    "resume": False,
    "warm_max_iters": None,    # iteration cap for warm-started folds
    "subjects": 19,            # simulate/sensitivity
    "plan": "forstmann",       # plan name or explicit [{"cell": {...}, "count": n}]
    "plan_scale": 1.0,
    "generating": {"fixture": "forstmann"},
    "generating_index": 19,    # index of the generating model inside the family
    "replications": 20,
    "lambda_file": None,       # fitted variational parameters (predict)
}


class ConfigError(ValueError):
    pass


def merge_config(args: argparse.Namespace) -> dict:
    config = dict(DEFAULTS)
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config}: {exc}") from None
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        config.update(loaded)
    for key in DEFAULTS:
        flag = getattr(args, key, None)
        if flag is not None and flag is not False:
            config[key] = flag
    return config


def output_dir(config: dict, command: str) -> Path:
    if config["out"]:
        path = Path(config["out"])
    else:
        root = os.environ.get(OUTPUT_ROOT_ENV, ".")
        path = Path(root) / command
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_schema(config: dict):
    name = config["schema"]
    if not name:
        raise ConfigError("no schema given (config key 'schema' or --schema)")
    if name in BUILTIN_SCHEMAS:
        return BUILTIN_SCHEMAS[name]()
    schema, _ = read_spec_file(name)
    return schema


def load_model(config: dict):
    path = config["model"]
    if not path:
        raise ConfigError("no model given (config key 'model' or --model)")
    schema, spec = read_spec_file(path)
    if spec is None:
        raise ConfigError(f"{path}: document has no [model] block")
    return schema, spec


def load_dataset(config: dict, schema) -> Dataset:
    if not config["data"]:
        raise ConfigError("no data file given (config key 'data' or --data)")
    return ingest_csv(config["data"], schema)


def vb_config(config: dict, n_factors: int | None = None, init=None) -> vb.VbConfig:
    if config["method"] not in ("gvb", "hybrid"):
        raise ConfigError(f"method must be 'gvb' or 'hybrid', got {config['method']!r}")
    return vb.VbConfig(
        method=config["method"],
        n_factors=int(n_factors if n_factors is not None else config["n_factors"]),
        n_mc=int(config["n_mc"]),
        max_iters=int(config["max_iters"]),
        window=int(config["window"]),
        patience=int(config["patience"]),
        seed=int(config["seed"]),
        init=init,
    )


def save_lambda(lam: vb.VariationalParams, path) -> None:
    np.savez(path, mu=lam.mu, b=lam.b, d=lam.d)


def load_lambda(path) -> vb.VariationalParams:
    with np.load(path) as data:
        return vb.VariationalParams(mu=data["mu"], b=data["b"], d=data["d"])


def resolve_plan(config: dict, schema) -> list:
    plan = config["plan"]
    if plan == "forstmann":
        base = simstudy.forstmann_plan(schema)
    elif isinstance(plan, list):
        base = []
        for item in plan:
            base.append((dict(item["cell"]), int(item["count"])))
    else:
        raise ConfigError(f"plan must be 'forstmann' or an explicit list, got {plan!r}")
    scale = float(config["plan_scale"])
    return [(cell, max(1, int(round(n * scale)))) for cell, n in base]


def resolve_generating(config: dict):
    gen = config["generating"]
    if "fixture" in gen:
        if gen["fixture"] != "forstmann":
            raise ConfigError(f"unknown generating fixture {gen['fixture']!r}")
        schema = BUILTIN_SCHEMAS["forstmann"]()
        spec, mu, sigma = simstudy.forstmann_truth(schema)
        return schema, spec, mu, sigma
    if "model" not in gen:
        raise ConfigError("generating config needs 'fixture' or 'model' + 'mu_alpha' + 'sigma_alpha'")
    schema, spec = read_spec_file(gen["model"])
    if spec is None:
        raise ConfigError(f"{gen['model']}: document has no [model] block")
    mu = np.asarray(gen["mu_alpha"], dtype=float)
    sigma = np.asarray(gen["sigma_alpha"], dtype=float)
    if mu.shape != (spec.d_alpha,) or sigma.shape != (spec.d_alpha, spec.d_alpha):
        raise ConfigError(f"generating parameters must have dimension {spec.d_alpha}")
    return schema, spec, mu, sigma


# ---------------------------------------------------------------------------
# Commands

def cmd_fit(config: dict) -> int:
    schema, spec = load_model(config)
    dataset = load_dataset(config, schema)
    result = vb.run_vb(dataset, spec, vb_config(config))
    out = output_dir(config, "fit")
    save_lambda(result.lam, out / "lambda.npz")
    result.trace.to_csv(out / "trace.csv")
    summary = {
        "schema_version": crossval.REPORT_SCHEMA_VERSION,
        "model": spec.label,
        "method": config["method"],
        "diagnostics": result.diagnostics,
        **vb.posterior_summary(result, dataset, spec, config["method"]),
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    print(f"fit: {len(result.trace)} iterations, "
          f"best moving-average lower bound {result.trace.best_avg:.3f}")
    print(f"fit: wrote {out / 'lambda.npz'}, {out / 'trace.csv'}, {out / 'summary.json'}")
    return EXIT_OK


def model_dir_name(index: int, spec_label: str) -> str:
    digest = hashlib.sha1(spec_label.encode()).hexdigest()[:8]
    return f"m{index:03d}_{digest}"


def build_family(config: dict, schema) -> ModelFamily:
    if config["family"]:
        return enumerate_family(config["family"], schema)
    if config["model"]:
        _, spec = read_spec_file(config["model"])
        if spec is None:
            raise ConfigError(f"{config['model']}: document has no [model] block")
        from .modelspec import FamilyMember
        return ModelFamily(kind="single", members=(FamilyMember(1, "model 1", spec),))
    raise ConfigError("cv needs a 'family' kind or a 'model' document")


def cmd_cv(config: dict) -> int:
    schema = load_schema(config)
    dataset = load_dataset(config, schema)
    family = build_family(config, schema)
    out = output_dir(config, "cv")
    n_folds, n_draws, seed = int(config["folds"]), int(config["draws"]), int(config["seed"])
    base = vb_config(config, n_factors=config["n_factors"])

    reports: list[crossval.ElpdReport] = []
    todo = []
    for member in family:
        mdir = out / model_dir_name(member.index, member.spec.label)
        done = mdir / "report.json"
        if config["resume"] and done.exists():
            with open(done) as fh:
                doc = json.load(fh)
            report = crossval.ElpdReport(
                model_index=member.index, label=member.label, spec_label=member.spec.label,
                n_folds=doc["n_folds"], n_draws=doc["n_draws"])
            report.fold_scores = [s if s is not None else float("nan")
                                  for s in doc["fold_scores"]]
            report.fold_status = doc["fold_status"]
            reports.append(report)
        else:
            todo.append(member)
    if todo:
        sub_family = ModelFamily(kind=family.kind, members=tuple(todo))
        screening = crossval.screen_models(
            sub_family, dataset, base, n_folds=n_folds, n_draws=n_draws, seed=seed,
            shortlist=int(config["shortlist"]), n_jobs=config["parallelism"],
            warm_max_iters=config["warm_max_iters"])
        for report in screening.reports:
            mdir = out / model_dir_name(report.model_index, report.spec_label)
            mdir.mkdir(parents=True, exist_ok=True)
            lambda_refs = []
            for k, lam in enumerate(report.fold_lambdas):
                if lam is not None:
                    ref = mdir / f"lambda_fold{k + 1}.npz"
                    save_lambda(lam, ref)
                    lambda_refs.append(str(ref.relative_to(out)))
                else:
                    lambda_refs.append(None)
            with open(mdir / "report.json", "w") as fh:
                json.dump({
                    "schema_version": crossval.REPORT_SCHEMA_VERSION,
                    "model_index": report.model_index,
                    "label": report.label,
                    "spec": report.spec_label,
                    "n_folds": report.n_folds,
                    "n_draws": report.n_draws,
                    "elpd": report.elpd if report.ok else None,
                    "fold_scores": [s if np.isfinite(s) else None for s in report.fold_scores],
                    "fold_status": report.fold_status,
                    "fold_lambdas": lambda_refs,
                    "diagnostics": report.diagnostics,
                }, fh, indent=2)
            reports.append(report)
    ranking = crossval.rank_models(reports)
    crossval.write_ranking_csv(ranking, out / "ranking.csv")
    crossval.write_ranking_json(ranking, out / "ranking.json",
                                extra={"family": family.kind, "folds": n_folds,
                                       "draws": n_draws, "seed": seed})
    top = ranking.entries[0][1]
    print(f"cv: ranked {len(reports)} models; best = {top.label} "
          f"(elpd {top.elpd:.2f})" if top.ok else "cv: best model failed")
    print(f"cv: wrote {out / 'ranking.csv'} and {out / 'ranking.json'}")
    return EXIT_OK


def cmd_simulate(config: dict) -> int:
    schema, spec, mu, sigma = resolve_generating(config)
    plan = resolve_plan(config, schema)
    cfg = simstudy.GeneratingConfig(spec=spec, mu_alpha=mu, sigma_alpha=sigma,
                                    n_subjects=int(config["subjects"]), plan=plan,
                                    seed=int(config["seed"]))
    dataset, effects = simstudy.generate_dataset_with_effects(cfg)
    out = output_dir(config, "simulate")
    write_csv(dataset, out / "trials.csv")
    np.savetxt(out / "effects.csv", effects, delimiter=",",
               header=",".join(spec.alpha_names()), comments="")
    print(f"simulate: wrote {dataset.n_trials} trials for {dataset.n_subjects} subjects "
          f"to {out / 'trials.csv'}")
    return EXIT_OK


def cmd_sensitivity(config: dict) -> int:
    schema, spec, mu, sigma = resolve_generating(config)
    if not config["family"]:
        raise ConfigError("sensitivity needs a 'family' kind")
    family = enumerate_family(config["family"], schema)
    if isinstance(config["family"], dict):
        # locate the generating model inside the custom family
        matches = [m.index for m in family if m.spec.formulas == spec.formulas]
        if matches and int(config["generating_index"]) not in matches:
            config = {**config, "generating_index": matches[0]}
    plan = resolve_plan(config, schema)
    cfg = simstudy.GeneratingConfig(spec=spec, mu_alpha=mu, sigma_alpha=sigma,
                                    n_subjects=int(config["subjects"]), plan=plan,
                                    seed=int(config["seed"]))
    generating_index = int(config["generating_index"])
    member = family.member(generating_index)
    if member.spec.formulas != spec.formulas:
        raise ConfigError(f"family member {generating_index} ({member.spec.label}) does not "
                          f"match the generating model ({spec.label})")

    def progress(done, total, rank):
        print(f"sensitivity: replication {done}/{total}, generating model rank {rank}",
              flush=True)

    curve = simstudy.sensitivity_study(
        family, generating_index, cfg, vb_config(config),
        n_replications=int(config["replications"]), n_folds=int(config["folds"]),
        n_draws=int(config["draws"]), seed=int(config["seed"]),
        n_jobs=config["parallelism"], warm_max_iters=config["warm_max_iters"],
        progress=progress)
    out = output_dir(config, "sensitivity")
    curve.to_csv(out / "sensitivity.csv")
    with open(out / "sensitivity.json", "w") as fh:
        json.dump({
            "schema_version": crossval.REPORT_SCHEMA_VERSION,
            "family": family.kind,
            "generating_index": generating_index,
            "ranks": curve.ranks,
            "n_failed": curve.n_failed,
        }, fh, indent=2)
    print(f"sensitivity: {curve.n_replications} replications completed "
          f"({curve.n_failed} failed); wrote {out / 'sensitivity.csv'}")
    return EXIT_OK


def cmd_predict(config: dict) -> int:
    schema, spec = load_model(config)
    dataset = load_dataset(config, schema)
    if not config["lambda_file"]:
        raise ConfigError("predict needs 'lambda_file' (output of fit)")
    lam = load_lambda(config["lambda_file"])
    n_draws = int(config["draws"])
    rng = np.random.default_rng(int(config["seed"]))
    result = simstudy.posterior_predictive(lam, spec, dataset, n_draws, rng)
    out = output_dir(config, "predict")
    result.to_csv(out / "predictive_summary.csv")
    for s, sim in enumerate(result.datasets):
        write_csv(sim, out / f"simulated_{s + 1:03d}.csv")
    print(f"predict: wrote summary and {len(result.datasets)} simulated datasets to {out}")
    return EXIT_OK


def cmd_print_config(config: dict) -> int:
    print(json.dumps(config, indent=2, default=str))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lbavb",
        description="Variational inference and cross-validated model screening "
                    "for hierarchical linear ballistic accumulator models.")
    parser.add_argument("--config", help="JSON configuration file")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--data")
        p.add_argument("--schema")
        p.add_argument("--model")
        p.add_argument("--family")
        p.add_argument("--method", choices=["gvb", "hybrid"])
        p.add_argument("--n-factors", dest="n_factors", type=int)
        p.add_argument("--n-mc", dest="n_mc", type=int)
        p.add_argument("--max-iters", dest="max_iters", type=int)
        p.add_argument("--window", type=int)
        p.add_argument("--patience", type=int)
        p.add_argument("--folds", "-K", dest="folds", type=int)
        p.add_argument("--draws", "-S", dest="draws", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--parallelism", type=int)
        p.add_argument("--shortlist", type=int)
        p.add_argument("--resume", action="store_true")
        p.add_argument("--subjects", type=int)
        p.add_argument("--plan-scale", dest="plan_scale", type=float)
        p.add_argument("--replications", type=int)
        p.add_argument("--generating-index", dest="generating_index", type=int)
        p.add_argument("--lambda-file", dest="lambda_file")
        p.add_argument("--warm-max-iters", dest="warm_max_iters", type=int)
        return p

    add("fit", "fit one model variationally and write the posterior summary")
    add("cv", "K-fold cross-validated ELPD ranking of a model family")
    add("simulate", "generate a synthetic hierarchical dataset")
    add("sensitivity", "replicate the generate/screen/rank cycle")
    add("predict", "posterior predictive simulation from a fitted model")
    add("print-config", "print the merged configuration and exit")
    return parser


COMMANDS = {
    "fit": cmd_fit,
    "cv": cmd_cv,
    "simulate": cmd_simulate,
    "sensitivity": cmd_sensitivity,
    "predict": cmd_predict,
    "print-config": cmd_print_config,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = merge_config(args)
        return COMMANDS[args.command](config)
    except (ConfigError, SpecError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except vb.VbDivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except HierDomainError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
