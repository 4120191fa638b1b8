"""Command-line orchestration: simulate, fit, grid-search, evaluate,
replicate, export-heatmap.

Every command takes a validated YAML config (see example-config.yaml) plus
a few overrides.  All randomness descends from the master seed through
fixed derivation paths:

* simulate: the master seed itself;
* replicate rep i: simulation seed (master, 1, i, 0), method seeds
  (master, 1, i, 1 + method position in the method registry) -- adding
  reps or removing methods never reshuffles existing results;
* grid search cell j: (fit seed, 2, j).

Report files carry no timestamps, so identical configs give byte-identical
outputs; `--deterministic` additionally forces sequential execution
(workers only distribute whole reps or grid cells, each sealed by its own
seed, so parallelism does not change results).
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import baselines, fileio, figures, metrics, solver
from .config import (
    ConfigError,
    METHODS,
    hyper_from_config,
    load_config,
    method_grids,
    sim_from_config,
)
from .core import derive_seed
from .metrics import aggregate_replications, evaluate_method, marginal_correlations
from .simgen import generate
from .solver import DivergenceError

TABLE_METRICS = ("c_err", "beta_err", "rmse")


def _config_digest(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode()
    ).hexdigest()[:16]


def _load(config_path, seed, jobs, deterministic, out) -> dict:
    try:
        cfg = load_config(config_path)
    except (ConfigError, OSError, ValueError) as exc:
        raise click.ClickException(f"bad config: {exc}")
    if seed is not None:
        cfg["seed"] = seed
    if jobs is not None:
        cfg["jobs"] = jobs
    if deterministic:
        cfg["deterministic"] = True
    if cfg["deterministic"]:
        cfg["jobs"] = 1
    if out is not None:
        cfg["out"] = out
    return cfg


def common_options(fn):
    fn = click.option("--config", "config_path", required=True,
                      type=click.Path(exists=True, dir_okay=False),
                      help="YAML run configuration.")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="Override the config master seed.")(fn)
    fn = click.option("--jobs", type=int, default=None,
                      help="Worker count for replicate / grid-search.")(fn)
    fn = click.option("--deterministic", is_flag=True,
                      help="Force sequential single-threaded execution.")(fn)
    fn = click.option("--out", type=click.Path(file_okay=False), default=None,
                      help="Override the output directory.")(fn)
    return fn


@click.group()
def main():
    """Multi-source scalar-on-image regression toolkit."""
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------- methods

def _tv_grid(cfg: dict, method: str) -> list[float]:
    configured = cfg["grids"].get(method)
    if configured and "lambda_tv" in configured:
        return [float(v) for v in configured["lambda_tv"]]
    return [float(cfg["hyper"]["lambda_tv"])]


def _pair_grid(cfg: dict, base) -> list:
    ranges = method_grids(cfg, "pair")
    grid = []
    for r, lam, gamma, tau in itertools.product(
        ranges["r_components"], ranges["lambda_tv"],
        ranges["gamma_sip"], ranges["tau"],
    ):
        grid.append(base.with_(r_components=int(r), lambda_tv=float(lam),
                               gamma_sip=float(gamma), tau=float(tau)))
    return grid


def run_method(method: str, train, val, cfg: dict, seed: int):
    """Fit one method on a bundle; returns (betas, coefficients, extras).

    `extras` is an ordered list of (key, value) report lines.
    """
    t_sources = len(train)
    hp = hyper_from_config(cfg, seed)

    if method == "pair":
        if cfg["grids"].get("pair"):
            result = solver.grid_search(train, val, _pair_grid(cfg, hp),
                                        master_seed=seed, jobs=cfg["jobs"])
            report = result.best_cell.report
            extras = [("grid_cells", len(result.cells)),
                      ("grid_best", result.best)]
        else:
            report = solver.fit(train, val, hp)
            extras = []
        params = report.params
        comps = params.components.reshape(params.r_components, -1)
        coefficients = (params.weights @ comps).reshape(t_sources, *params.shape)
        extras += [
            ("stopped_epoch", report.stopped_epoch),
            ("best_epoch", report.best_epoch),
            ("val_loss", report.val_loss),
        ] + [(f"hyper.{k}", v) for k, v in sorted(vars(report.hp).items())]
        return params.betas, coefficients, extras, report

    if method == "sirtv":
        tv_grid = _tv_grid(cfg, "sirtv")
        betas, coeffs, extras = [], [], []
        for t in range(t_sources):
            hp_t = hp.with_(seed=derive_seed(seed, 4, t))
            bfit = baselines.fit_sirtv(train[t], tv_grid, val[t], hp_t)
            betas.append(bfit.betas[0])
            coeffs.append(bfit.coefficients[0])
            extras += [
                (f"{train[t].source_id}.lambda_tv", bfit.tuning["lambda_tv"]),
                (f"{train[t].source_id}.val_loss", bfit.tuning["val_loss"]),
            ]
        return np.asarray(betas), np.asarray(coeffs), extras, None

    if method == "pool":
        bfit = baselines.fit_pool(
            train, _tv_grid(cfg, "pool"), val, hp,
            stage_indicator=cfg["options"]["pool_stage_indicator"],
        )
        extras = [("lambda_tv", bfit.tuning["lambda_tv"]),
                  ("val_loss", bfit.tuning["val_loss"])]
        return bfit.betas, bfit.coefficients, extras, None

    if method in ("vr", "rvr", "tr", "rtr"):
        betas, coeffs, extras = [], [], []
        for t in range(t_sources):
            sid = train[t].source_id
            if method == "vr":
                bfit = baselines.fit_vr(train[t],
                                        marginal=cfg["options"]["vr_marginal"])
            elif method == "rvr":
                grid = method_grids(cfg, "rvr")["alpha"]
                bfit = baselines.fit_rvr(train[t], grid, val[t])
                extras.append((f"{sid}.alpha", bfit.tuning["alpha"]))
            elif method == "tr":
                grid = method_grids(cfg, "tr")["rank"]
                bfit = baselines.fit_tr(train[t], grid, val[t])
                extras.append((f"{sid}.rank", bfit.tuning["rank"]))
            else:
                ranges = method_grids(cfg, "rtr")
                bfit = baselines.fit_rtr(train[t], ranges["rank"],
                                         ranges["alpha"], val[t])
                extras.append((f"{sid}.rank", bfit.tuning["rank"]))
                extras.append((f"{sid}.alpha", bfit.tuning["alpha"]))
            betas.append(bfit.betas[0])
            coeffs.append(bfit.coefficients[0])
        return np.asarray(betas), np.asarray(coeffs), extras, None

    raise click.ClickException(f"unknown method {method!r}")


# ---------------------------------------------------------------- simulate

@main.command()
@common_options
def simulate(config_path, seed, jobs, deterministic, out):
    """Generate train/validation/test bundles plus the generating truth."""
    cfg = _load(config_path, seed, jobs, deterministic, out)
    out_dir = Path(cfg["out"])
    sim_cfg = sim_from_config(cfg, cfg["seed"])
    try:
        train, val, test, truth = generate(
            sim_cfg, image_source=cfg["sim"]["image_source"],
            image_path=cfg["sim"]["image_path"],
        )
    except (ValueError, OSError) as exc:
        raise click.ClickException(str(exc))
    normalized = cfg["sim"]["image_source"] == "from_files"
    for name, bundle in (("train", train), ("val", val), ("test", test)):
        fileio.write_bundle(out_dir / name, bundle,
                            intercept=sim_cfg.intercept,
                            normalized=normalized)
    comp_mat = truth.components.reshape(truth.r_components, -1)
    coeffs = (truth.weights @ comp_mat).reshape(
        sim_cfg.t_sources, sim_cfg.p, sim_cfg.q
    )
    fileio.write_params(out_dir / "truth", betas=truth.betas,
                        weights=truth.weights, components=truth.components,
                        coefficients=coeffs, method="truth")
    click.echo(f"wrote bundles under {out_dir} "
               f"(setting {sim_cfg.setting}, n={sim_cfg.n_per_source}, "
               f"split {train[0].n}/{val[0].n}/{test[0].n})")


# ---------------------------------------------------------------- fit

def _write_fit_outputs(cfg, out_dir, method, betas, coefficients, extras,
                       report, source_ids):
    pairs = [("format", "msir-fit-report"), ("method", method),
             ("seed", cfg["seed"]), ("config_sha256", _config_digest(cfg))]
    pairs += extras
    fileio.write_report(out_dir / "fit_report.txt", pairs)

    params_kwargs = {"betas": betas, "coefficients": coefficients}
    if report is not None:
        params_kwargs["components"] = report.params.components
        params_kwargs["weights"] = report.params.weights
    fileio.write_params(out_dir / "params", method=method, **params_kwargs)

    heat_dir = out_dir / "heatmaps"
    heat_dir.mkdir(parents=True, exist_ok=True)
    scale = cfg["options"]["heatmap_scale"]
    for sid, c in zip(source_ids, coefficients):
        fileio.export_heatmap(c, heat_dir / f"coefficient_{sid}.pgm", scale)

    if cfg["options"]["figures"]:
        fig_dir = out_dir / "figures"
        fig_dir.mkdir(parents=True, exist_ok=True)
        figures.save_coefficient_grid(
            list(coefficients), source_ids, fig_dir / "coefficients.png"
        )
        if report is not None:
            figures.save_coefficient_grid(
                list(report.params.components),
                [f"component_{r}" for r in range(report.params.r_components)],
                fig_dir / "components.png",
            )
            figures.save_epoch_trace(report.epoch_log, fig_dir / "epochs.png")


@main.command()
@common_options
def fit(config_path, seed, jobs, deterministic, out):
    """Fit the configured method on bundles from disk and write the report,
    fitted parameters, per-source coefficient heatmaps and figures."""
    cfg = _load(config_path, seed, jobs, deterministic, out)
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = cfg["data"]
    if not paths["train"] or not paths["val"]:
        raise click.ClickException("config data.train and data.val are required")
    try:
        train = fileio.read_bundle(paths["train"])
        val = fileio.read_bundle(paths["val"])
    except (OSError, ValueError) as exc:
        raise click.ClickException(f"cannot read bundles: {exc}")
    method = cfg["method"]
    try:
        betas, coefficients, extras, report = run_method(
            method, train, val, cfg, cfg["seed"]
        )
    except DivergenceError as exc:
        raise click.ClickException(str(exc))
    _write_fit_outputs(cfg, out_dir, method, betas, coefficients, extras,
                       report, [ds.source_id for ds in train])
    click.echo(f"fit {method} on {len(train)} source(s); outputs in {out_dir}")


# ---------------------------------------------------------------- grid search

@main.command("grid-search")
@common_options
def grid_search_cmd(config_path, seed, jobs, deterministic, out):
    """Grid search for the shared-component model; writes the full cell
    table and the best cell's report and parameters."""
    cfg = _load(config_path, seed, jobs, deterministic, out)
    if cfg["method"] != "pair":
        raise click.ClickException(
            "grid-search applies to method 'pair'; baseline penalties are "
            "tuned inside their fit commands"
        )
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = cfg["data"]
    if not paths["train"] or not paths["val"]:
        raise click.ClickException("config data.train and data.val are required")
    train = fileio.read_bundle(paths["train"])
    val = fileio.read_bundle(paths["val"])
    hp = hyper_from_config(cfg, cfg["seed"])
    grid = _pair_grid(cfg, hp)
    try:
        result = solver.grid_search(train, val, grid, master_seed=cfg["seed"],
                                    jobs=cfg["jobs"])
    except RuntimeError as exc:
        raise click.ClickException(str(exc))

    lines = ["cell\tr_components\tlambda_tv\tgamma_sip\ttau\tval_loss\tstatus"]
    for i, cell in enumerate(result.cells):
        status = "ok" if cell.report is not None else f"failed: {cell.error}"
        loss = format(cell.val_loss, ".17g") if cell.report is not None else "nan"
        lines.append(f"{i}\t{cell.hp.r_components}\t{cell.hp.lambda_tv:g}"
                     f"\t{cell.hp.gamma_sip:g}\t{cell.hp.tau:g}\t{loss}\t{status}")
    (out_dir / "grid_table.tsv").write_text("\n".join(lines) + "\n")

    best = result.best_cell
    report = best.report
    comps = report.params.components.reshape(report.params.r_components, -1)
    coefficients = (report.params.weights @ comps).reshape(
        len(train), train[0].p, train[0].q
    )
    extras = [("grid_cells", len(result.cells)), ("grid_best", result.best),
              ("stopped_epoch", report.stopped_epoch),
              ("best_epoch", report.best_epoch), ("val_loss", report.val_loss)]
    extras += [(f"hyper.{k}", v) for k, v in sorted(vars(best.hp).items())]
    _write_fit_outputs(cfg, out_dir, "pair", report.params.betas, coefficients,
                       extras, report, [ds.source_id for ds in train])
    click.echo(f"grid search over {len(grid)} cells; best cell {result.best} "
               f"(val loss {best.val_loss:.6g}); outputs in {out_dir}")


# ---------------------------------------------------------------- evaluate

@main.command()
@common_options
def evaluate(config_path, seed, jobs, deterministic, out):
    """Score fitted parameters on a test bundle; writes metric tables and,
    when training data is available, explained-variance ratios and
    marginal-correlation figures."""
    cfg = _load(config_path, seed, jobs, deterministic, out)
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = cfg["data"]
    if not paths["test"] or not paths["params"]:
        raise click.ClickException("config data.test and data.params are required")
    test = fileio.read_bundle(paths["test"])
    loaded = fileio.read_params(paths["params"])
    if "betas" not in loaded or "coefficients" not in loaded:
        raise click.ClickException("params directory lacks betas/coefficients")
    truth = None
    if paths["truth"]:
        truth = fileio.params_to_pair(fileio.read_params(paths["truth"]))
    train = fileio.read_bundle(paths["train"]) if paths["train"] else None

    t_sources = len(test)
    coeffs = loaded["coefficients"]
    report = evaluate_method(loaded["method"] or cfg["method"], test,
                             loaded["betas"], coeffs, truth=truth,
                             train_bundle=train)

    pairs = [("format", "msir-eval-report"), ("method", report.method),
             ("config_sha256", _config_digest(cfg))]
    rows = ["source\tmetric\tvalue"]
    for name in report.METRICS:
        values = getattr(report, name)
        if values is None:
            continue
        for t in range(t_sources):
            pairs.append((f"{report.source_ids[t]}.{name}", float(values[t])))
            rows.append(f"{report.source_ids[t]}\t{name}\t"
                        + format(float(values[t]), ".17g"))
    fileio.write_report(out_dir / "eval_report.txt", pairs)
    (out_dir / "eval.tsv").write_text("\n".join(rows) + "\n")

    if cfg["options"]["figures"] and train is not None:
        fig_dir = out_dir / "figures"
        fig_dir.mkdir(parents=True, exist_ok=True)
        for ds in train:
            corr = marginal_correlations(ds)
            figures.save_marginal_correlations(
                corr, fig_dir / f"marginals_{ds.source_id}.png"
            )
    click.echo(f"evaluated {report.method}; outputs in {out_dir}")


# ---------------------------------------------------------------- replicate

def _replicate_worker(args):
    cfg, rep = args
    master = cfg["seed"]
    sim_cfg = sim_from_config(cfg, derive_seed(master, 1, rep, 0))
    train, val, test, truth = generate(
        sim_cfg, image_source=cfg["sim"]["image_source"],
        image_path=cfg["sim"]["image_path"],
    )
    results = {}
    for method in cfg["methods"]:
        fit_seed = derive_seed(master, 1, rep, 1 + METHODS.index(method))
        try:
            betas, coefficients, _, _ = run_method(method, train, val, cfg,
                                                   fit_seed)
            results[method] = evaluate_method(method, test, betas,
                                              coefficients, truth=truth)
        except (DivergenceError, RuntimeError, ValueError) as exc:
            results[method] = f"{type(exc).__name__}: {exc}"
    return rep, results


def _aggregate_table(cfg, per_method_reports, failures, n_reps, out_dir):
    sim = cfg["sim"]
    methods = list(cfg["methods"])
    summaries = {}
    for method, reports in per_method_reports.items():
        if len(reports) >= 2:
            summaries[method] = aggregate_replications(reports)

    source_ids = None
    for reports in per_method_reports.values():
        if reports:
            source_ids = reports[0].source_ids
            break
    if source_ids is None:
        raise click.ClickException("every replication failed for every method")

    long_rows = ["setting\tn_per_source\tn_reps\tsource\tmetric\tmethod\tmean\tsd"]
    for metric in TABLE_METRICS:
        for t, sid in enumerate(source_ids):
            for method in methods:
                stats = summaries.get(method, {}).get(metric)
                if stats is None:
                    mean_s = sd_s = "nan"
                else:
                    mean_s = format(float(stats[0][t]), ".17g")
                    sd_s = format(float(stats[1][t]), ".17g")
                long_rows.append(
                    f"{sim['setting']}\t{sim['n_per_source']}\t{n_reps}"
                    f"\t{sid}\t{metric}\t{method}\t{mean_s}\t{sd_s}"
                )
    (out_dir / "replicate_long.tsv").write_text("\n".join(long_rows) + "\n")

    width = max(12, *(len(m) + 2 for m in methods))
    lines = [f"setting {sim['setting']}  n {sim['n_per_source']}  reps {n_reps}"]
    for metric in TABLE_METRICS:
        lines.append("")
        lines.append(f"metric {metric}")
        header = "source".ljust(14) + "".join(m.ljust(width + 10) for m in methods)
        lines.append(header)
        for t, sid in enumerate(source_ids):
            row = sid.ljust(14)
            for method in methods:
                stats = summaries.get(method, {}).get(metric)
                if stats is None:
                    cell = "-"
                else:
                    cell = f"{stats[0][t]:.3f} ({stats[1][t]:.3f})"
                row += cell.ljust(width + 10)
            lines.append(row)
    lines.append("")
    for method in methods:
        n_fail = sum(1 for _, m, _ in failures if m == method)
        lines.append(f"failures {method} {n_fail}/{n_reps}")
    (out_dir / "replicate_table.txt").write_text("\n".join(lines) + "\n")

    fail_lines = [f"rep {rep} method {method} error {msg}"
                  for rep, method, msg in failures]
    (out_dir / "replicate_failures.txt").write_text(
        "\n".join(fail_lines) + "\n" if fail_lines else ""
    )

    if cfg["options"]["figures"]:
        fig_dir = out_dir / "figures"
        fig_dir.mkdir(parents=True, exist_ok=True)
        for metric in TABLE_METRICS:
            per_metric = {m: s[metric] for m, s in summaries.items()
                          if metric in s}
            figures.save_replication_bars(
                per_metric, methods, source_ids, metric,
                fig_dir / f"replicate_{metric}.png",
            )
    return summaries


@main.command()
@common_options
@click.option("--reps", type=int, default=None,
              help="Override replicate.n_reps from the config.")
def replicate(config_path, seed, jobs, deterministic, out, reps):
    """Run seeded replications of simulate+fit+evaluate for each configured
    method and write the aggregated mean (sd) table, per Table-1 layout."""
    cfg = _load(config_path, seed, jobs, deterministic, out)
    n_reps = reps if reps is not None else cfg["replicate"]["n_reps"]
    if n_reps < 2:
        raise click.ClickException("replicate needs at least 2 reps")
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    args = [(cfg, rep) for rep in range(n_reps)]
    if cfg["jobs"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
            outcomes = list(pool.map(_replicate_worker, args))
    else:
        outcomes = [_replicate_worker(a) for a in args]
    outcomes.sort(key=lambda item: item[0])

    per_method_reports = {m: [] for m in cfg["methods"]}
    failures = []
    for rep, results in outcomes:
        for method, result in results.items():
            if isinstance(result, str):
                failures.append((rep, method, result))
            else:
                per_method_reports[method].append(result)

    _aggregate_table(cfg, per_method_reports, failures, n_reps, out_dir)
    click.echo(f"replicated {n_reps} runs for {len(cfg['methods'])} method(s); "
               f"{len(failures)} failure(s); outputs in {out_dir}")
    if failures:
        sys.exit(1)


# ---------------------------------------------------------------- heatmap

@main.command("export-heatmap")
@common_options
def export_heatmap_cmd(config_path, seed, jobs, deterministic, out):
    """Export one matrix as a 16-bit graymap (plus a PNG rendering)."""
    cfg = _load(config_path, seed, jobs, deterministic, out)
    exp = cfg["export"]
    if not exp["input"]:
        raise click.ClickException("config export.input is required")
    src = Path(exp["input"])
    if src.is_dir():
        loaded = fileio.read_params(src)
        if exp["field"] not in loaded:
            raise click.ClickException(
                f"params directory has no field {exp['field']!r}"
            )
        stack = loaded[exp["field"]]
        if not 0 <= exp["index"] < stack.shape[0]:
            raise click.ClickException(
                f"export.index {exp['index']} out of range for {stack.shape[0]}"
            )
        matrix = stack[exp["index"]]
    else:
        try:
            matrix = np.loadtxt(src, ndmin=2)
        except (OSError, ValueError) as exc:
            raise click.ClickException(f"cannot read matrix: {exc}")
    out_path = Path(exp["output"] or Path(cfg["out"]) / "heatmap.pgm")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fileio.export_heatmap(matrix, out_path, exp["scale"])
    except ValueError as exc:
        raise click.ClickException(str(exc))
    if cfg["options"]["figures"]:
        figures.save_coefficient_grid(
            [matrix], [out_path.stem], out_path.with_suffix(".png"),
            symmetric=exp["scale"] == "symmetric",
        )
    click.echo(f"wrote {out_path}")


if __name__ == "__main__":
    main()
