"""HMFN - pedestrian detection in semi-structured crowds from LiDAR pillars."""

import functools
import json
import logging
import sys
from pathlib import Path

import click

from . import __version__
from .config import (
    DEFAULT_PRESET,
    PRESETS,
    RunConfig,
    config_hash,
    get_presets_summary,
    resolve_config,
    save_config,
)
from .errors import ContractError, HMFNError

logger = logging.getLogger(__name__)

LAYOUT_CHOICES = (
    "main_pathway",
    "courtyard",
    "bridge_crossing",
    "covered_corridor",
    "open_plaza",
    "mixed",
)
CALIBRATION_EXTENT = 25.6


def _configure_logging(verbose: bool, debug: bool) -> None:
    level = logging.DEBUG if debug else logging.INFO if verbose else logging.WARNING
    logging.basicConfig(
        level=level,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def handle_errors(fn):
    """Turn library errors into a message and the matching exit code."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except HMFNError as e:
            click.echo(f"❌ {e}", err=True)
            violations = getattr(e, "violations", None)
            for v in violations or []:
                click.echo(f"   {v}", err=True)
            raise SystemExit(e.exit_code)
        except OSError as e:
            click.echo(f"❌ I/O error: {e}", err=True)
            raise SystemExit(2)

    return wrapper


def _resolve(preset: str | None, config_file: str | None, **overrides) -> RunConfig:
    cfg = resolve_config(preset, config_file, overrides)
    logger.info("Config %s (preset %s)", config_hash(cfg), preset or DEFAULT_PRESET)
    return cfg


def _preset_option(fn):
    fn = click.option(
        "--config",
        "config_file",
        type=click.Path(exists=True, dir_okay=False),
        default=None,
        help="JSON config file (overrides the preset)",
    )(fn)
    return click.option(
        "--preset",
        "-p",
        default=None,
        help=f"Preset name, '+'-joined to stack (default: {DEFAULT_PRESET})",
    )(fn)


@click.group(invoke_without_command=True)
@click.option("--verbose", "-v", is_flag=True, help="Log progress to stderr")
@click.option("--debug", "-d", is_flag=True, help="Log step-by-step details")
@click.option("--trace", "-t", is_flag=True, help="Enable OTEL tracing")
@click.option("--list-presets", is_flag=True, help="List config presets and exit")
@click.option("--version", "-V", is_flag=True, help="Show version")
@click.pass_context
def main(
    ctx: click.Context,
    verbose: bool,
    debug: bool,
    trace: bool,
    list_presets: bool,
    version: bool,
):
    """Train and evaluate multi-scale pillar detectors on synthetic crowds.

    Examples:

    \b
        hmfn synth --scenes 20 --out data/crowd
        hmfn validate --root data/crowd
        hmfn split --root data/crowd --seed 0
        hmfn train --preset hmfn+desk --root data/crowd --out runs/hmfn
        hmfn infer --checkpoint runs/hmfn/best --root data/crowd --split test --out dets.json
        hmfn eval --results dets.json --root data/crowd --split test
        hmfn gradcheck --ops all
        hmfn doctor
    """
    _configure_logging(verbose, debug)

    if trace:
        from .tracing import setup_tracing

        if setup_tracing(console_output=debug):
            if verbose:
                click.echo("🔍 OTEL tracing enabled (view at http://localhost:16686)", err=True)
        else:
            click.echo("⚠️  Tracing unavailable (install: pip install hmfn[tracing])", err=True)

    if ctx.invoked_subcommand is not None:
        return

    if version:
        click.echo(f"hmfn {__version__}")
        return

    if list_presets:
        click.echo(get_presets_summary())
        return

    click.echo(ctx.get_help())


# ============================================================================
# Data
# ============================================================================


@main.command()
@click.option("--layout", type=click.Choice(LAYOUT_CHOICES), default="mixed", help="Scene type")
@click.option("--scenes", type=int, default=10, show_default=True, help="Number of scenes")
@click.option("--frames", type=int, default=20, show_default=True, help="Frames per scene")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--calibrate-to-pfsd", is_flag=True, help="Match the reference crowd density")
@click.option("--extent", type=float, default=None, help="Half-size of the scene in meters")
@click.option("--cyclists", type=float, default=0.0, show_default=True, help="Cyclists per frame")
@click.option("--speed-noise", type=float, default=0.0, show_default=True, help="Velocity noise std")
@click.option("--workers", type=int, default=1, show_default=True)
@_preset_option
@handle_errors
def synth(
    layout: str,
    scenes: int,
    frames: int,
    seed: int,
    out_dir: str,
    calibrate_to_pfsd: bool,
    extent: float | None,
    cyclists: float,
    speed_noise: float,
    workers: int,
    preset: str | None,
    config_file: str | None,
):
    """Generate a synthetic crowd dataset."""
    from dataclasses import asdict, replace

    from .dataset import build_tables, write_dataset
    from .evaluation import density_stats
    from .synth import (
        PFSD_REFERENCE,
        CrowdModel,
        SynthRequest,
        calibrate_crowd,
        generate_scenes,
        make_layout,
    )

    cfg = _resolve(preset, config_file)
    if extent is None:
        extent = CALIBRATION_EXTENT if calibrate_to_pfsd else cfg.half_extent
    kind = None if layout == "mixed" else layout
    crowd = CrowdModel(cyclists_per_frame=cyclists)

    request = SynthRequest(
        scenes=scenes,
        frames=frames,
        seed=seed,
        layout=kind,
        extent=extent,
        crowd=crowd,
        lidar=cfg.lidar_model(),
        speed_noise_std=speed_noise,
    )
    if scenes < 1:
        raise ContractError("no scenes requested")

    if calibrate_to_pfsd:
        kinds = sorted({request.layout_for(i) for i in range(scenes)})
        calibrated = []
        for k in kinds:
            click.echo(f"Calibrating crowd for {k}...")
            layout_model = make_layout(k, extent)
            model = calibrate_crowd(
                PFSD_REFERENCE, layout_model, rng_seed=seed, base=crowd, scene_frames=frames
            )
            calibrated.append((k, model))
        request = replace(request, crowd_by_layout=tuple(calibrated))

    generated = generate_scenes(request, workers=workers)
    tables, payloads = build_tables(generated, seed=seed, sensor_height=request.lidar.sensor_height)
    root = write_dataset(tables, out_dir, payloads)
    save_config(cfg, out_dir)
    request_record = {
        "scenes": scenes,
        "frames": frames,
        "seed": seed,
        "layout": layout,
        "extent": extent,
        "calibrated": calibrate_to_pfsd,
        "crowd_by_layout": {k: asdict(c) for k, c in request.crowd_by_layout},
        "crowd": asdict(crowd),
        "speed_noise_std": speed_noise,
    }
    (Path(out_dir) / "synth_request.json").write_text(
        json.dumps(request_record, indent=2, sort_keys=True) + "\n"
    )

    click.echo(f"✅ Wrote {scenes} scenes x {frames} frames to {root}")
    click.echo(density_stats(tables).format_row())


@main.command()
@click.option("--root", type=click.Path(exists=True, file_okay=False), required=True)
@handle_errors
def validate(root: str):
    """Check referential and chain integrity of a dataset."""
    from .dataset import load_dataset
    from .dataset import validate as validate_tables

    violations = validate_tables(load_dataset(root))
    if violations:
        for v in violations:
            click.echo(f"  ❌ {v}")
        click.echo(f"{len(violations)} violation(s) found")
        raise SystemExit(1)
    click.echo("✅ Dataset is valid")


@main.command()
@click.option("--root", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--split", "split_name", default=None, help="Restrict to one split")
@click.option("--json", "as_json", is_flag=True, help="Print JSON instead of a table row")
@handle_errors
def stats(root: str, split_name: str | None, as_json: bool):
    """Print crowd density statistics."""
    from .dataset import load_dataset
    from .evaluation import density_stats
    from .training import resolve_scenes

    tables = load_dataset(root)
    tokens = None
    if split_name is not None:
        scenes = set(resolve_scenes(tables, root, split_name, seed=0))
        tokens = [s.token for s in tables.sample if s.scene_token in scenes]
    result = density_stats(tables, tokens)
    if as_json:
        click.echo(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    else:
        click.echo(result.format_row())


@main.command()
@click.option("--root", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option(
    "--ratios",
    type=(float, float, float),
    default=(0.70, 0.15, 0.15),
    show_default=True,
    help="Train/val/test fractions",
)
@click.option("--no-stratify", is_flag=True, help="Ignore scene layouts when splitting")
@handle_errors
def split(root: str, seed: int, ratios: tuple[float, float, float], no_stratify: bool):
    """Write a scene-level train/val/test split manifest."""
    from .dataset import load_dataset, split_scenes, write_split

    result = split_scenes(load_dataset(root), ratios, rng_seed=seed, stratify_by_layout=not no_stratify)
    path = write_split(root, result)
    for w in result.warnings:
        click.echo(f"⚠️  {w}", err=True)
    click.echo(
        f"✅ train {len(result.train)} / val {len(result.val)} / test {len(result.test)} -> {path}"
    )


# ============================================================================
# Model
# ============================================================================


@main.command()
@_preset_option
@click.option("--root", "data_root", default=None, help="Dataset root")
@click.option("--out", "output_dir", default=None, help="Run directory")
@click.option("--split", default=None, help="Training split")
@click.option("--val-split", default=None, help="Validation split ('none' to skip)")
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--max-steps", type=int, default=None)
@click.option("--lr", "learning_rate", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--scales", default=None, help="Comma-separated pillar sizes, reference first")
@click.option("--speed/--no-speed", default=None, help="Append velocity channels")
@click.option("--pedes-only/--all-classes", default=None, help="Train on pedestrians only")
@click.option("--workers", type=int, default=None)
@click.option("--precision", type=click.Choice(["float32", "float64"]), default=None)
@handle_errors
def train(preset: str | None, config_file: str | None, scales: str | None, **flags):
    """Train HMFN and keep the best validation checkpoint."""
    from .training import train as run_training

    if scales is not None:
        flags["scales"] = tuple(float(s) for s in scales.split(","))
    cfg = _resolve(preset, config_file, **flags)
    result = run_training(cfg)
    click.echo(f"✅ Trained {result.steps} steps, config {config_hash(cfg)}")
    if result.best_val_map is not None:
        click.echo(f"   best val mAP {100 * result.best_val_map:.2f}")
    click.echo(f"   checkpoint: {result.best_checkpoint}")


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--root", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--split", default="val", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Results file")
@handle_errors
def infer(checkpoint: str, root: str | None, split: str, out: str):
    """Write detections of a checkpoint over a split."""
    from .training import infer as run_inference

    results, path = run_inference(checkpoint, root, split, out)
    total = sum(len(v) for v in results.values())
    click.echo(f"✅ {total} detections over {len(results)} frames -> {path}")


@main.command(name="eval")
@click.option("--results", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--root", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--split", default="val", show_default=True)
@click.option("--report", type=click.Path(dir_okay=False), default=None, help="Write report JSON")
@click.option("--plot-data", type=click.Path(dir_okay=False), default=None, help="Write PR points")
@click.option("--include-empty", is_flag=True, help="Keep GT boxes without LiDAR points")
@click.option("--max-range", type=float, default=None, help="Ignore objects beyond this range")
@click.option(
    "--counterexample",
    type=click.Path(dir_okay=False),
    default=None,
    help="Where to dump a threshold-monotonicity failure (default: next to the report)",
)
@handle_errors
def eval_cmd(
    results: str,
    root: str,
    split: str,
    report: str | None,
    plot_data: str | None,
    include_empty: bool,
    max_range: float | None,
    counterexample: str | None,
):
    """Score a results file: AP at 0.5/1/2/4 m and mAP."""
    from .dataset import load_dataset
    from .evaluation import COUNTEREXAMPLE_SUFFIX, evaluate, load_results, write_pr_curves, write_report
    from .training import resolve_scenes

    tables = load_dataset(root)
    detections, _ = load_results(results)
    scenes = set(resolve_scenes(tables, root, split, seed=0))
    tokens = [s.token for s in tables.sample if s.scene_token in scenes]
    if counterexample is None:
        counterexample = str(Path(report or results).with_suffix(COUNTEREXAMPLE_SUFFIX))
    outcome = evaluate(
        detections,
        tables,
        sample_tokens=tokens,
        include_empty=include_empty,
        max_range=max_range,
        counterexample_path=counterexample,
    )
    click.echo(outcome.format_table())
    if outcome.counterexample:
        click.echo(f"⚠️  AP drops at a looser threshold; counterexample -> {outcome.counterexample}")
    if report:
        write_report(report, outcome)
    if plot_data:
        write_pr_curves(plot_data, outcome)


@main.command()
@click.option("--ops", default="all", show_default=True, help="'all' or comma-separated names")
@click.option("--seed", type=int, default=0, show_default=True, help="First of five seeds")
@click.option("--list", "list_checks", is_flag=True, help="List available checks")
@handle_errors
def gradcheck(ops: str, seed: int, list_checks: bool):
    """Compare analytic gradients with finite differences."""
    from .gradcheck import CHECKS, DEFAULT_TOLERANCE, run_checks

    if list_checks:
        for name, check in CHECKS.items():
            click.echo(f"  {name:<20} {check.description}")
        return
    results = run_checks(ops, seeds=tuple(range(seed, seed + 5)))
    failed = 0
    for r in results:
        mark = "✅" if r.passed else "❌"
        click.echo(f"  {mark} {r.name:<20} max rel. error {r.max_error:.3e}")
        if not r.passed:
            click.echo(f"     worst case: {r.worst_case}")
        failed += not r.passed
    if failed:
        click.echo(f"{failed} check(s) above {DEFAULT_TOLERANCE:g}")
        raise SystemExit(1)


@main.command()
def doctor():
    """Check that the numerics work and optional features are available.

    Verifies:
    - numpy and shapely import
    - a gradient check passes
    - every preset builds a consistent config
    """
    import importlib.util

    click.echo("🔍 HMFN Health Check\n")
    all_ok = True

    click.echo("Checking dependencies...")
    try:
        import numpy
        import shapely

        click.echo(f"  ✅ numpy {numpy.__version__}, shapely {shapely.__version__}")
    except ImportError as e:
        click.echo(f"  ❌ Missing dependency: {e}")
        all_ok = False

    click.echo("\nChecking gradients...")
    try:
        from .gradcheck import run_check

        result = run_check("conv2d", seeds=(0,))
        if result.passed:
            click.echo(f"  ✅ conv2d gradient error {result.max_error:.1e}")
        else:
            click.echo(f"  ❌ conv2d gradient error {result.max_error:.1e}")
            all_ok = False
    except Exception as e:
        click.echo(f"  ❌ Gradient check failed: {e}")
        all_ok = False

    click.echo("\nChecking presets...")
    from .config import check_alignment

    for name in PRESETS:
        try:
            check_alignment(resolve_config(name))
        except HMFNError as e:
            click.echo(f"  ❌ {name}: {e}")
            all_ok = False
    if all_ok:
        click.echo(f"  ✅ {len(PRESETS)} presets resolve")

    click.echo("\nChecking optional features...")
    if importlib.util.find_spec("opentelemetry") and importlib.util.find_spec("opentelemetry.sdk"):
        click.echo("  ✅ OTEL tracing available (--trace flag)")
    else:
        click.echo("  ⚪ OTEL tracing not installed (optional)")
        click.echo("     Install: pip install hmfn[tracing]")

    click.echo("\n" + "=" * 40)
    if all_ok:
        click.echo("✅ All checks passed! HMFN is ready.")
    else:
        click.echo("⚠️  Some issues found. See above for details.")
        raise SystemExit(1)


if __name__ == "__main__":
    main()
