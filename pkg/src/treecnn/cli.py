"""``treecnn`` command line: run, report, verify, effort-table, export-dot."""
import json
import logging
import sys
import time

import click

from treecnn import runs, trainer
from treecnn.nn import zoo
from treecnn.nn.spec import SpecError

# (class counts per row, training images per class) for the analytic effort table
EFFORT_PRESETS = {
    "cifar100": (tuple(range(20, 101, 10)), 500),
    "cifar10": ((10,), 5000),
}


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (-v info, -vv debug).")
def main(verbose):
    """Tree-CNN incremental learning experiments."""
    level = logging.WARNING if verbose == 0 else (logging.INFO if verbose == 1 else logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--out", "run_dir", type=click.Path(file_okay=False), required=True, help="Run directory.")
@click.option("--data-dir", type=click.Path(exists=True, file_okay=False), help="Base for relative dataset paths.")
@click.option("--schedule", help="Bundled schedule name or schedule file.")
@click.option("--seed", type=int, help="Master seed.")
@click.option("--epochs", type=int, help="Epochs per node (desk scale).")
@click.option("--downsample", type=int, help="Integer image downsampling factor.")
@click.option("--shrink", type=int, help="Channel/width divisor for node and baseline networks.")
def run(config, run_dir, data_dir, schedule, seed, epochs, downsample, shrink):
    """Train the initial model and every scheduled stage; resumes an interrupted run."""
    start = time.perf_counter()
    try:
        raw = runs.apply_overrides(
            runs.load_config(config), epochs=epochs, downsample=downsample, shrink=shrink,
            seed=seed, schedule=schedule, data_dir=data_dir,
        )
        manifest = runs.execute_run(raw, run_dir, progress=lambda msg: click.echo(msg, err=True))
    except runs.ConfigError as exc:
        for field, msg in exc.errors:
            click.echo(f"config error: {field}: {msg}", err=True)
        sys.exit(2)
    except SpecError as exc:
        click.echo(f"config error: network: {exc}", err=True)
        sys.exit(2)
    except runs.RunError as exc:
        raise click.ClickException(str(exc)) from None
    click.echo(f"{run_dir}: {len(manifest['stages'])} stage(s) in {time.perf_counter() - start:.1f}s")


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv")
def report(run_dir, fmt):
    """Write effort/accuracy tables under RUN_DIR/report and print them."""
    try:
        out = runs.write_report(run_dir)
    except runs.RunError as exc:
        raise click.ClickException(str(exc)) from None
    for name in ("effort", "accuracy"):
        path = f"{out}/{name}.{fmt}"
        with open(path) as fh:
            click.echo(f"# {name}")
            click.echo(fh.read().rstrip())


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
def verify(run_dir):
    """Re-check tree invariants, label transforms, effort arithmetic and checkpoints."""
    checks = runs.verify_run(run_dir)
    for name, ok, detail in checks:
        click.echo(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail and not ok else ""))
    if not all(ok for _, ok, _ in checks):
        sys.exit(1)


@main.command("effort-table")
@click.option("--dataset", type=click.Choice(sorted(EFFORT_PRESETS)), default="cifar100")
@click.option("--classes", "class_counts", help="Comma-separated class counts per stage (overrides preset).")
@click.option("--samples-per-class", type=int, help="Training images per class (overrides preset).")
@click.option("--shrink", type=int, default=1, show_default=True)
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv")
@click.option("--digits", type=int, default=2, show_default=True, help="Decimals in CSV output.")
def effort_table(dataset, class_counts, samples_per_class, shrink, fmt, digits):
    """Normalised baseline training effort per stage, computed from the network spec."""
    counts, per_class = EFFORT_PRESETS[dataset]
    if class_counts:
        counts = tuple(int(c) for c in class_counts.split(","))
    if samples_per_class:
        per_class = samples_per_class
    table, raw, ref = trainer.effort_table(counts, per_class, shrink=shrink)
    modes = list(zoo.BASELINE_MODES)
    if fmt == "json":
        click.echo(json.dumps({"reference": ref, "rows": [
            {"classes": n, **{m: table[n][m] for m in modes}, "raw": raw[n]} for n in counts
        ]}, indent=2))
        return
    click.echo(",".join(["classes"] + modes))
    for n in counts:
        click.echo(",".join([str(n)] + [f"{table[n][m]:.{digits}f}" for m in modes]))


@main.command("export-dot")
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--stage", type=int, help="Stage index (default: last completed).")
@click.option("-o", "--out", type=click.Path(dir_okay=False), help="Write to a file instead of stdout.")
def export_dot(run_dir, stage, out):
    """Graphviz topology of a tree run."""
    try:
        text = runs.export_dot(run_dir, stage)
    except (runs.RunError, OSError) as exc:
        raise click.ClickException(str(exc)) from None
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        click.echo(text, nl=False)


if __name__ == "__main__":
    main()
