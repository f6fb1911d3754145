"""Command-line interface: prepare data, train, evaluate, sweep and inspect runs."""

import itertools
import json
import logging
import os
import sys
from multiprocessing import Pool

import click
import numpy as np
import pandas as pd

import clustering
import evaluation
import registry
from dataset import (IT_SCHEMA, UI_SCHEMA, apply_filters, load_bundle, load_interactions,
                     load_labels, save_bundle, sparsify_users, split_dataset)
from errors import CheckFailed, ConfigError, ImcatError
from forms import (load_run_config, parse_overrides, read_config_file, validate_run_config,
                   write_run_config)
from generator.helpers import make_synthetic, write_tsvs
from models import (BACKBONES, LIGHTGCN, ModelDims, build_adjacency, check_compatible,
                    init_parameters, load_checkpoint)
from trainer import GRID, LOSSES, TrainConfig, grad_check, tiny_problem, train

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class ImcatGroup(click.Group):
    """Turns domain errors into exit code 1; click keeps 2 for usage errors."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except ImcatError as exc:
            logger.error("%s", exc)
            ctx.exit(1)


def setup_logging(verbose):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT,
                        stream=sys.stderr, force=True)


def echo_json(payload):
    click.echo(json.dumps(payload, indent=2, sort_keys=True, default=float))


def _columns(text):
    return tuple(name.strip() for name in text.split(","))


def _ratios(text):
    try:
        ratios = tuple(float(part) for part in text.split(","))
    except ValueError:
        raise click.BadParameter(f"{text!r} is not a comma-separated list of numbers")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise click.BadParameter("need three ratios summing to 1")
    return ratios


@click.group(cls=ImcatGroup)
@click.option("--verbose", "-v", is_flag=True, help="Log at DEBUG level.")
def cli(verbose):
    """Tag-aware multi-intent recommendation training."""

    setup_logging(verbose)


##############################################################################
# Data


@cli.command()
@click.option("--ui", "ui_path", required=True, type=click.Path(), help="User-item TSV.")
@click.option("--it", "it_path", required=True, type=click.Path(), help="Item-tag TSV.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Bundle directory.")
@click.option("--ui-columns", default=",".join(UI_SCHEMA), show_default=True,
              help="UI column names; use _ to skip a column.")
@click.option("--it-columns", default=",".join(IT_SCHEMA), show_default=True)
@click.option("--header", is_flag=True, help="Skip the first line of both files.")
@click.option("--rating-threshold", default=4.0, show_default=True)
@click.option("--min-user", default=10, show_default=True)
@click.option("--min-item", default=10, show_default=True)
@click.option("--min-tag", default=5, show_default=True)
@click.option("--split", "ratios", default="0.7,0.1,0.2", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--sparse-out", type=click.Path(),
              help="Also write a sparse-user bundle for cold-start evaluation.")
@click.option("--sparse-threshold", default=10, show_default=True)
def prepare(ui_path, it_path, out_dir, ui_columns, it_columns, header, rating_threshold,
            min_user, min_item, min_tag, ratios, seed, sparse_out, sparse_threshold):
    """Filter, split and binarize raw TSVs into a dataset bundle."""

    ratios = _ratios(ratios)
    raw_ui = load_interactions(ui_path, _columns(ui_columns), header)
    raw_it = load_labels(it_path, _columns(it_columns), header)

    dataset = apply_filters(raw_ui, raw_it, rating_threshold, min_user, min_item, min_tag)
    dataset = split_dataset(dataset, ratios, seed)
    stats = save_bundle(dataset, out_dir)
    logger.info("bundle written to %s", out_dir)

    if sparse_out:
        sparse = sparsify_users(dataset, sparse_threshold, seed)
        save_bundle(sparse, sparse_out)
        logger.info("sparse-user bundle written to %s", sparse_out)

    echo_json(stats.to_dict())


@cli.command()
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--users", default=200, show_default=True)
@click.option("--items", default=300, show_default=True)
@click.option("--tags", default=60, show_default=True)
@click.option("--intents", default=4, show_default=True)
@click.option("--items-per-user", default=25, show_default=True)
@click.option("--tags-per-item", default=5, show_default=True)
@click.option("--seed", default=0, show_default=True)
def synth(out_dir, users, items, tags, intents, items_per_user, tags_per_item, seed):
    """Write synthetic ui.tsv (user, item, rating, timestamp) and it.tsv."""

    ui, it = make_synthetic(users, items, tags, intents, items_per_user, tags_per_item,
                            seed=seed)
    ui_path, it_path = write_tsvs(ui, it, out_dir)
    echo_json({"ui": ui_path, "it": it_path, "ui_rows": len(ui), "it_rows": len(it)})


##############################################################################
# Training


def run_training(config, resume=None, progress=False):
    """Train one resolved run config, recording it in the registry."""

    dataset = load_bundle(config["dataset.bundle"])
    run_dir = config["run.dir"]
    write_run_config(config, run_dir)

    Session = registry.connect_db()
    with Session() as session:
        run = registry.find_run(session, run_dir) if resume else None
        if run is None:
            run = registry.Run.start(session, run_dir, config)
        session.commit()

        try:
            result = train(dataset, TrainConfig.from_mapping(config), run_dir, resume, progress)
        except ImcatError:
            run.fail()
            session.commit()
            raise

        run.finish(result.state.best_epoch, result.state.best_recall)
        session.commit()

    summary = {"run_dir": run_dir, "best_epoch": result.state.best_epoch,
               "best_valid_recall": result.state.best_recall,
               "epochs": result.state.epoch}
    logger.info("run finished: %s", summary)
    return summary


def _checkpoint_path(path):
    if not os.path.exists(path) and os.path.exists(path + ".imck"):
        return path + ".imck"
    return path


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(), help="Flat JSON config.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Override one config key; repeatable.")
@click.option("--resume", type=click.Path(), help="Checkpoint to continue from.")
@click.option("--progress/--no-progress", default=False, help="Epoch progress bar.")
def train_command(config_path, overrides, resume, progress):
    """Train one model and write its run directory."""

    if resume:
        resume = _checkpoint_path(resume)
        if not config_path:
            config_path = os.path.join(os.path.dirname(resume), "config.json")

    config = load_run_config(config_path, overrides)
    echo_json(run_training(config, resume, progress))


def expand_axes(axes):
    """['alpha=0.1,1', 'K=1,4'] -> [{'alpha': '0.1', 'K': '1'}, ...].

    A bare name ('delta') sweeps its values from GRID.
    """

    names, choices = [], []
    for axis in axes:
        name, sep, values = axis.partition("=")
        name = name.strip()
        if not sep and name in GRID:
            choices.append([str(value) for value in GRID[name]])
        elif sep and values:
            choices.append([value.strip() for value in values.split(",")])
        else:
            raise click.BadParameter(f"{axis!r} is not name=v1,v2,... or one of {sorted(GRID)}",
                                     param_hint="--axis")
        names.append(name)
    return [dict(zip(names, cell)) for cell in itertools.product(*choices)]


def cell_name(cell):
    return "_".join(f"{name}={value}" for name, value in cell.items()) or "default"


def _sweep_cell(config):
    try:
        return run_training(config)
    except ImcatError as exc:
        logger.error("cell %s failed: %s", config["run.dir"], exc)
        return {"run_dir": config["run.dir"], "error": str(exc)}


@cli.command()
@click.option("--config", "config_path", type=click.Path())
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
@click.option("--axis", "axes", multiple=True, required=True, metavar="NAME=V1,V2",
              help="Grid axis; repeatable. A bare name (alpha, beta, gamma, delta, K) "
                   "uses the built-in grid. Cells are the cartesian product.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--jobs", default=1, show_default=True, type=click.IntRange(min=1))
def sweep(config_path, overrides, axes, out_dir, jobs):
    """Train every cell of a hyperparameter grid, one run directory each."""

    base = read_config_file(config_path) if config_path else {}
    base.update(parse_overrides(overrides))

    configs = []
    for cell in expand_axes(axes):
        values = {**base, **cell, "run.dir": os.path.join(out_dir, cell_name(cell))}
        configs.append(validate_run_config(values))
    logger.info("sweeping %d cells with %d job(s)", len(configs), jobs)

    if jobs == 1:
        results = [_sweep_cell(config) for config in configs]
    else:
        with Pool(jobs) as pool:
            results = pool.map(_sweep_cell, configs)

    echo_json(results)
    if any("error" in result for result in results):
        sys.exit(1)


##############################################################################
# Evaluation and inspection


def load_run(run_dir, ckpt, bundle):
    """(resolved config, dataset, model) for a run directory checkpoint."""

    config_file = os.path.join(run_dir, "config.json")
    has_config = os.path.exists(config_file)
    config = validate_run_config(read_config_file(config_file) if has_config else {})

    if ckpt in ("best", "last"):
        ckpt = os.path.join(run_dir, f"ckpt_{ckpt}.imck")
    dataset = load_bundle(bundle or config["dataset.bundle"])
    model = load_checkpoint(_checkpoint_path(ckpt))
    check_compatible(model, dataset, d=config["d"] if has_config else None)
    if model.dims.backbone == LIGHTGCN:
        model.set_adjacency(build_adjacency(dataset.ui_train))
        model.propagate()
    return config, dataset, model


@cli.command("evaluate")
@click.option("--run", "run_dir", default=".", type=click.Path(), show_default=True)
@click.option("--ckpt", default="best", show_default=True,
              help="best, last, or a checkpoint path.")
@click.option("--bundle", type=click.Path(), help="Defaults to the run's dataset.bundle.")
@click.option("--split", default="test", type=click.Choice(["valid", "test"]),
              show_default=True)
@click.option("--topn", multiple=True, type=int, default=(20,), show_default=True)
@click.option("--groups", is_flag=True, help="Write popularity-group contributions.")
@click.option("--cold-start", is_flag=True, help="Metrics for users with few train items.")
@click.option("--cold-threshold", default=10, show_default=True)
@click.option("--timing", is_flag=True, help="Write the time-to-recall curve.")
def evaluate_command(run_dir, ckpt, bundle, split, topn, groups, cold_start, cold_threshold,
                     timing):
    """Score a checkpoint and write metrics.json plus optional reports."""

    config, dataset, model = load_run(run_dir, ckpt, bundle)
    Ns = tuple(sorted(set(topn)))
    os.makedirs(run_dir, exist_ok=True)

    summary = {split: evaluation.evaluate_split(model, dataset, split, Ns)}

    if groups:
        users = np.flatnonzero(np.diff(dataset.ui_test.indptr))
        ranked = evaluation.rank_users(model, dataset, users, max(Ns))
        report = evaluation.popularity_group_report(dataset, ranked, N=min(Ns))
        report.to_frame().to_csv(os.path.join(run_dir, "groups.csv"), index=False)
        summary["groups"] = dict(zip(report.to_frame()["group"], report.contributions))

    if cold_start:
        summary["cold_start"] = evaluation.cold_start_report(model, dataset, cold_threshold, Ns)

    if timing:
        history_path = os.path.join(run_dir, "history.jsonl")
        history = pd.read_json(history_path, lines=True).to_dict("records") \
            if os.path.exists(history_path) else []
        evaluation.timing_report(history).to_csv(os.path.join(run_dir, "timing.csv"),
                                                 index=False)

    with open(os.path.join(run_dir, "metrics.json"), "w") as handle:
        json.dump(summary, handle, indent=2, sort_keys=True, default=float)

    Session = registry.connect_db()
    with Session() as session:
        run = registry.find_run(session, config["run.dir"])
        if run is not None:
            registry.record_metrics(session, run, split, summary[split])
            session.commit()

    echo_json(summary)


@cli.command("inspect-clusters")
@click.option("--run", "run_dir", default=".", type=click.Path(), show_default=True)
@click.option("--ckpt", default="best", show_default=True)
@click.option("--bundle", type=click.Path())
@click.option("--m-csv", type=click.Path(), help="Also write the item-intent matrix here.")
def inspect_clusters(run_dir, ckpt, bundle, m_csv):
    """Print per-cluster tag membership as JSON."""

    config, dataset, model = load_run(run_dir, ckpt, bundle)
    state = clustering.refresh(model, dataset.it_labels, config["eta"])
    echo_json(clustering.cluster_members(state.hard_assign, dataset.tags, state.K))

    if m_csv:
        frame = pd.DataFrame(state.M, index=dataset.items.externals,
                             columns=[f"intent_{k}" for k in range(state.K)])
        frame.index.name = "item"
        frame.to_csv(m_csv)


@cli.command()
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path())
@click.option("--split", default="test", show_default=True)
@click.option("--no-isa-run", type=click.Path(),
              help="Baseline run; also print recall by delta relative to it.")
@click.option("--metric", default="recall@20", show_default=True)
def compare(run_dirs, split, no_isa_run, metric):
    """Print metrics of several evaluated runs relative to the best, as CSV."""

    def metrics_of(run_dir):
        path = os.path.join(run_dir, "metrics.json")
        if not os.path.exists(path):
            raise ConfigError({run_dir: ["no metrics.json; run evaluate first"]})
        with open(path) as handle:
            return json.load(handle).get(split, {})

    rows = {os.path.basename(os.path.normpath(run_dir)): {
        key: value for key, value in metrics_of(run_dir).items() if "@" in key}
        for run_dir in run_dirs}
    click.echo(evaluation.relative_report(rows).to_csv(), nl=False)

    if no_isa_run:
        baseline = metrics_of(no_isa_run)[metric]
        by_delta = {validate_run_config(read_config_file(
            os.path.join(run_dir, "config.json")))["delta"]: metrics_of(run_dir)[metric]
            for run_dir in run_dirs}
        echo_json({str(delta): ratio for delta, ratio
                   in evaluation.threshold_report(by_delta, baseline).items()})


@cli.command()
@click.option("--status", type=click.Choice([registry.RUNNING, registry.FINISHED,
                                             registry.FAILED]))
def runs(status):
    """List registered runs as JSON."""

    Session = registry.connect_db()
    with Session() as session:
        query = session.query(registry.Run).order_by(registry.Run.id)
        if status:
            query = query.filter_by(status=status)
        echo_json([run.to_dict() for run in query])


@cli.command("grad-check")
@click.option("--loss", "losses", multiple=True, type=click.Choice(LOSSES),
              help="Loss term to check; repeatable. Defaults to all.")
@click.option("--backbone", default="bprmf", type=click.Choice(BACKBONES), show_default=True)
@click.option("--d", default=8, show_default=True)
@click.option("--K", "K", default=2, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--tolerance", default=1e-4, show_default=True)
def grad_check_command(losses, backbone, d, K, seed, tolerance):
    """Compare analytic and finite-difference gradients on a tiny problem."""

    dataset = tiny_problem(seed)
    dims = ModelDims(dataset.n_users, dataset.n_items, dataset.n_tags, d, K, backbone)
    adjacency = build_adjacency(dataset.ui_train) if backbone == LIGHTGCN else None
    config = TrainConfig(d=d, K=K, backbone=backbone, delta=0.3, seed=seed)

    reports, failure = [], None
    for loss in losses or LOSSES:
        model = init_parameters(dims, seed=seed, dtype=np.float64, adjacency=adjacency)
        try:
            report = grad_check(model, dataset, loss, config, tolerance, seed=seed)
        except CheckFailed as exc:
            failure, report = exc, exc.report
        reports.append(report.to_dict())
    echo_json(reports)
    if failure:
        raise failure


if __name__ == "__main__":
    cli()
