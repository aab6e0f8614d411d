"""Command-line entry points.

Every setting lives in one flat :class:`RunConfig`.  Values come from the
field defaults, then an optional ``--config`` file of ``key = value`` lines,
then command-line flags (``--window-span 0.2`` overrides ``window_span``).
``--dump-config`` prints the resolved configuration and exits.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, io, pipeline, synth
from .errors import DomainError, FormatError, InsufficientDataError, NumericalError, VWEError
from .field import GridSpec, KernelSchedule, accumulate_fast
from .objective import MultiVolumeConfig, OmegaObjective, VolumeContrast, VolumeWindow
from .trajectory import SampledTrajectory, SplineModel

log = logging.getLogger("vwe")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


class ConfigError(DomainError):
    """Invalid or inconsistent run configuration."""


@dataclasses.dataclass
class RunConfig:
    # paths
    events: str = ""
    calibration: str = ""
    trajectory: str = ""
    truth: str = ""
    spline: str = ""
    density: str = ""
    out: str = "out"
    # synthetic data
    suite: str = "circle"
    seed: int = 0
    # grid and kernel; grid_nx = grid_ny = 0 means one cell per pixel
    grid_nx: int = 0
    grid_ny: int = 0
    grid_nz: int = 32
    z_min: float = 0.5
    z_max: float = 10.0
    kernel_voxels: float = 0.5
    truncation_radius: float = 6.0
    # front-end
    window_span: float = 0.1
    v_config: float = 0.5
    min_events: int = 500
    omega_min: float = -1.0
    omega_max: float = 1.0
    n_grid: int = 21
    tol: float = 1e-5
    fe_max_iter: int = 100
    # back-end
    tau1: float = 0.2
    tau2: float = 0.4
    degree: int = 3
    ctrl_per_second: float = 2.0
    coordinates: str = "turns"
    be_max_iter: int = 50
    max_step: float = 0.05
    rel_tol: float = 1e-6
    # depth maps; t_ref = nan picks the middle of the stream
    t_ref: float = math.nan
    depth_span: float = 0.4
    depth_k: float = 3.0
    # evaluation, landscapes and plots
    interval: float = 1.0
    landscape_n: int = 81
    plot_align: str = "first"
    threads: int = 1

    def validate(self) -> None:
        if self.suite not in synth.SUITES:
            raise ConfigError(f"unknown suite {self.suite!r}; choose from {sorted(synth.SUITES)}")
        if self.coordinates not in ("turns", "points"):
            raise ConfigError("coordinates must be 'turns' or 'points'")
        if self.plot_align not in ("first", "scaled"):
            raise ConfigError("plot_align must be 'first' or 'scaled'")
        if (self.grid_nx == 0) != (self.grid_ny == 0) or self.grid_nx < 0 or self.grid_ny < 0:
            raise ConfigError("grid_nx and grid_ny must both be positive or both be 0")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if not self.omega_min < self.omega_max:
            raise ConfigError("omega_min must be below omega_max")
        for name in ("window_span", "v_config", "tau1", "tau2", "depth_span", "interval", "ctrl_per_second"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    # -- text form ---------------------------------------------------------

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_format_value(getattr(self, f.name))}\n" for f in dataclasses.fields(self))

    def digest(self) -> str:
        """Hash of every setting except the output directory."""
        text = "".join(
            f"{f.name} = {_format_value(getattr(self, f.name))}\n" for f in dataclasses.fields(self) if f.name != "out"
        )
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def as_dict(self, include_out: bool = False) -> dict:
        d = dataclasses.asdict(self)
        if not include_out:
            d.pop("out")
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}

    def set(self, key: str, raw: str, where: str = "") -> None:
        fields = {f.name: f for f in dataclasses.fields(self)}
        if key not in fields:
            raise ConfigError(f"{where}unknown setting {key!r}")
        setattr(self, key, _parse_value(raw, key, where))

    # -- derived module configs ------------------------------------------

    def grid(self, camera) -> GridSpec:
        if self.grid_nx == 0:
            return pipeline.sensor_grid(camera, self.grid_nz, self.z_min, self.z_max)
        return GridSpec(self.grid_nx, self.grid_ny, self.grid_nz, self.z_min, self.z_max)

    def frontend(self, camera) -> pipeline.FrontEndConfig:
        return pipeline.FrontEndConfig(
            window_span=self.window_span, v_config=self.v_config, min_events=self.min_events,
            omega_bracket=(self.omega_min, self.omega_max), grid=self.grid(camera),
            kernel_voxels=self.kernel_voxels, truncation_radius=self.truncation_radius,
            n_grid=self.n_grid, tol=self.tol, max_iter=self.fe_max_iter,
        )

    def backend(self, camera) -> tuple[pipeline.SplineConfig, MultiVolumeConfig]:
        sc = pipeline.SplineConfig(
            degree=self.degree, ctrl_per_second=self.ctrl_per_second, grid=self.grid(camera),
            kernel_voxels=self.kernel_voxels, truncation_radius=self.truncation_radius,
            min_events=self.min_events, max_iter=self.be_max_iter, rel_tol=self.rel_tol,
            max_step=self.max_step, threads=self.threads, coordinates=self.coordinates,
        )
        return sc, MultiVolumeConfig(self.tau1, self.tau2)


_DEFAULTS = {f.name: f.default for f in dataclasses.fields(RunConfig)}


def _format_value(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _parse_value(raw: str, key: str, where: str = ""):
    kind = type(_DEFAULTS[key])
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return str(raw)
    except ValueError:
        raise ConfigError(f"{where}{key}: cannot parse {raw!r} as {kind.__name__}") from None


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    """Apply ``key = value`` lines from ``path`` on top of ``base``."""
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    for no, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{no}: expected 'key = value'")
        key, raw = (s.strip() for s in body.split("=", 1))
        cfg.set(key, raw, f"{path}:{no}: ")
    return cfg


# ----------------------------------------------------------------------------
# shared helpers
# ----------------------------------------------------------------------------


def _require(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if not getattr(cfg, n)]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _set_threads(n: int) -> None:
    import numba

    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def _manifest(cfg: RunConfig, command: str, outputs: list[Path], extra: dict | None = None) -> dict:
    out_dir = Path(cfg.out)
    return {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config_hash": cfg.digest(),
        "config": cfg.as_dict(),
        "outputs": sorted(str(Path(p).relative_to(out_dir)) if Path(p).is_relative_to(out_dir) else str(p) for p in outputs),
        **(extra or {}),
    }


def _write_json(path: Path, data: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_inputs(cfg: RunConfig):
    _require(cfg, "events", "calibration")
    camera, ext = io.load_calibration(cfg.calibration)
    events = io.load_events(cfg.events)
    if len(events) == 0:
        raise InsufficientDataError(f"{cfg.events}: no events")
    return events, camera, ext


def _load_model(cfg: RunConfig, ext):
    """Trajectory model from ``--spline`` or ``--trajectory``."""
    if cfg.spline:
        return SplineModel(io.load_spline(cfg.spline), ext)
    _require(cfg, "trajectory")
    return SampledTrajectory.from_samples(io.load_trajectory(cfg.trajectory), ext)


def _mid_time(cfg: RunConfig, events) -> float:
    return 0.5 * (float(events.t[0]) + float(events.t[-1])) if math.isnan(cfg.t_ref) else cfg.t_ref


class Timer:
    """Wall-clock seconds per named stage."""

    def __init__(self):
        self.stages: dict[str, float] = {}

    def run(self, name, fn, *args, **kw):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kw)
        except VWEError as exc:
            exc.args = (f"[{name}] {exc}",) + exc.args[1:]
            raise
        finally:
            self.stages[name] = self.stages.get(name, 0.0) + time.perf_counter() - t0

    def record(self, **extra) -> dict:
        return {"stages_seconds": dict(self.stages), "total_seconds": sum(self.stages.values()), **extra}


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> int:
    out = io.ensure_dir(cfg.out)
    bundle = synth.make_suite(cfg.suite, cfg.seed)
    paths = [out / "events.txt", out / "truth.txt", out / "scene.txt", out / "calibration.txt"]
    io.save_events(paths[0], bundle.events)
    io.save_trajectory(paths[1], bundle.samples)
    io.save_scene(paths[2], bundle.scene)
    io.save_calibration(paths[3], bundle.camera, bundle.extrinsics)
    meta = {k: v for k, v in bundle.meta.items()}
    _write_json(out / "manifest.json", _manifest(cfg, "simulate", paths, {"suite_meta": meta, "n_events": len(bundle.events)}))
    print(f"simulated {cfg.suite!r} (seed {cfg.seed}): {len(bundle.events)} events -> {out}")
    return EXIT_OK


def cmd_estimate(cfg: RunConfig) -> int:
    timer = Timer()
    events, camera, ext = timer.run("load", _load_inputs, cfg)
    out = io.ensure_dir(cfg.out)
    res = timer.run("frontend", pipeline.run_frontend, events, camera, cfg.frontend(camera), ext)
    traj = out / "trajectory.txt"
    io.save_trajectory(traj, res.chained_trajectory)
    seg = out / "segments.csv"
    with open(seg, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_start", "t_end", "omega", "value", "n_events", "evaluations", "flagged", "boundary_warning"])
        for s in res.segments:
            w.writerow([io.fmt(s.t_start), io.fmt(s.t_end), io.fmt(s.omega), io.fmt(s.value), s.n_events,
                        s.evaluations, int(s.flagged), int(s.boundary_warning)])
    timing = _write_json(out / "timing.json", timer.record(
        events=len(events), events_per_second=res.throughput,
        stream_seconds=float(events.duration), processing_to_stream_ratio=res.realtime_factor,
    ))
    _write_json(out / "manifest.json", _manifest(cfg, "estimate", [traj, seg, timing]))
    print(f"front-end: {len(res.segments)} windows, {res.throughput:.0f} events/s, "
          f"processing/stream time {res.realtime_factor:.2f} -> {traj}")
    return EXIT_OK


def cmd_refine(cfg: RunConfig) -> int:
    timer = Timer()
    events, camera, ext = timer.run("load", _load_inputs, cfg)
    _require(cfg, "trajectory")
    initial = timer.run("load", io.load_trajectory, cfg.trajectory)
    out = io.ensure_dir(cfg.out)
    sc, mv = cfg.backend(camera)
    res = timer.run("backend", pipeline.run_backend, events, camera, initial, sc, mv, ext)
    spline_path, traj = out / "spline.txt", out / "trajectory.txt"
    io.save_spline(spline_path, res.spline)
    a, b = res.model.domain
    n = max(2, int(math.ceil((b - a) * 100)) + 1)
    io.save_trajectory(traj, res.model.sample(np.linspace(a, b, n)))
    timing = _write_json(out / "timing.json", timer.record(
        iterations=res.solve.iterations, objective_initial=res.solve.initial_value, objective_final=res.solve.value,
        converged=res.solve.converged,
    ))
    _write_json(out / "manifest.json", _manifest(cfg, "refine", [spline_path, traj, timing]))
    print(f"back-end: objective {res.solve.initial_value:.6g} -> {res.solve.value:.6g} "
          f"in {res.solve.iterations} iterations -> {spline_path}")
    return EXIT_OK


def cmd_map(cfg: RunConfig) -> int:
    timer = Timer()
    events, camera, ext = timer.run("load", _load_inputs, cfg)
    model = timer.run("load", _load_model, cfg, ext)
    out = io.ensure_dir(cfg.out)
    t_ref = _mid_time(cfg, events)
    grid_spec = cfg.grid(camera)

    def build():
        window = events.window(t_ref - 0.5 * cfg.depth_span, t_ref + 0.5 * cfg.depth_span)
        if len(window) == 0:
            raise InsufficientDataError("no events around the reference time")
        grid = grid_spec.build(camera, t_ref, model.camera_pose(t_ref))
        kernel = KernelSchedule.for_grid(grid, cfg.kernel_voxels, cfg.truncation_radius)
        return accumulate_fast(window, model, camera, grid, kernel)

    field_ = timer.run("density", build)
    dm = timer.run("depth", pipeline.depth_from_field, field_, cfg.depth_k, t_ref)
    io.save_depth_map(out / "depth", dm)
    io.save_density(out / "density", field_)
    cloud = out / "points.txt"
    io.save_point_cloud(cloud, dm.points())
    timing = _write_json(out / "timing.json", timer.record(valid_cells=len(dm)))
    paths = [out / "depth.f32", out / "depth.txt", out / "density.f32", out / "density.txt", cloud, timing]
    _write_json(out / "manifest.json", _manifest(cfg, "map", paths, {"t_ref": t_ref}))
    med = float(np.median(dm.depth[dm.valid])) if len(dm) else math.nan
    print(f"depth map at t={t_ref:.4f}: {len(dm)} cells, median depth {med:.4f} m -> {cloud}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    _require(cfg, "trajectory", "truth")
    est = io.load_trajectory(cfg.trajectory)
    truth = io.load_trajectory(cfg.truth)
    m = pipeline.evaluate_rpe(est, truth, cfg.interval)
    out = io.ensure_dir(cfg.out)
    path = out / "metrics.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in m.as_dict().items():
            w.writerow([k, io.fmt(v)])
    for k, v in m.as_dict().items():
        print(f"{k:>20s} {v:.6g}")
    return EXIT_OK


def cmd_landscape(cfg: RunConfig) -> int:
    events, camera, ext = _load_inputs(cfg)
    t_ref = _mid_time(cfg, events)
    window = VolumeWindow.from_stream(events, t_ref, cfg.window_span)
    grid_spec = cfg.grid(camera)
    contrast = VolumeContrast(events, camera, window, grid_spec, None, cfg.min_events)
    contrast.kernel = KernelSchedule.for_grid(contrast.grid, cfg.kernel_voxels, cfg.truncation_radius)
    objective = OmegaObjective(contrast, cfg.v_config, ext)
    omegas = np.linspace(cfg.omega_min, cfg.omega_max, cfg.landscape_n)
    values = [objective(w) for w in omegas]
    if not all(map(math.isfinite, values)):
        raise NumericalError("non-finite objective in landscape")
    out = io.ensure_dir(cfg.out)
    path = out / "landscape.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["omega", "value"])
        for om, v in zip(omegas, values):
            w.writerow([io.fmt(om), io.fmt(v)])
    best = omegas[int(np.argmax(values))]
    print(f"landscape at t={t_ref:.4f}: argmax omega {best:.4f} -> {path}")
    return EXIT_OK


def cmd_plot(cfg: RunConfig) -> int:
    from . import plot

    out = io.ensure_dir(cfg.out)
    written = []
    if cfg.trajectory:
        curves = {"estimate": io.load_trajectory(cfg.trajectory)}
        if cfg.truth:
            truth = io.load_trajectory(cfg.truth)
            curves = {"estimate": plot.align(curves["estimate"], truth, cfg.plot_align), "truth": truth}
        path = out / "trajectory.svg"
        path.write_text(plot.trajectory_svg(curves), encoding="utf-8")
        written.append(path)
    if cfg.density:
        field_ = io.load_density(cfg.density)
        written += io.save_density_slices(out / "slices", field_)
        path = out / "density.svg"
        path.write_text(plot.density_svg(field_.values), encoding="utf-8")
        written.append(path)
    if not written:
        raise ConfigError("plot needs --trajectory and/or --density")
    for p in written:
        log.info("wrote %s", p)
    print(f"wrote {len(written)} file(s) to {out}")
    return EXIT_OK


COMMANDS = {
    "simulate": (cmd_simulate, "generate a synthetic suite with ground truth"),
    "estimate": (cmd_estimate, "front-end yaw-rate estimation over short windows"),
    "refine": (cmd_refine, "back-end spline refinement over overlapping volumes"),
    "map": (cmd_map, "semi-dense depth map from density maxima"),
    "evaluate": (cmd_evaluate, "relative pose error of an estimate against ground truth"),
    "landscape": (cmd_landscape, "objective versus yaw rate for one window"),
    "plot": (cmd_plot, "SVG trajectory plot and density slice images"),
}


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------


def _config_arguments(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("settings (override the config file)")
    for f in dataclasses.fields(RunConfig):
        kind = type(f.default)
        group.add_argument(
            "--" + f.name.replace("_", "-"), dest=f.name, default=argparse.SUPPRESS,
            type=kind, metavar=kind.__name__.upper(), help=f"default: {_format_value(f.default)}",
        )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' settings file")
    common.add_argument("--dump-config", action="store_true", help="print the resolved settings and exit")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    _config_arguments(common)
    parser = argparse.ArgumentParser(prog="vwe", description="Event-camera odometry by volumetric contrast maximization.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for f in dataclasses.fields(RunConfig):
        if hasattr(args, f.name):
            setattr(cfg, f.name, getattr(args, f.name))
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        parser.exit(EXIT_USAGE, f"vwe {args.command}: error: {exc}\n")
    if args.dump_config:
        sys.stdout.write(cfg.dumps())
        return EXIT_OK
    _set_threads(cfg.threads)
    fn = COMMANDS[args.command][0]
    try:
        return fn(cfg)
    except ConfigError as exc:
        print(f"vwe {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"vwe {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, InsufficientDataError, DomainError, VWEError, OSError) as exc:
        print(f"vwe {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
