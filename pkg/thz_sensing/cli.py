"""Command line pipeline: synth, estimate, track, model and report stages."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from types import TracebackType
from typing import Any, Dict, List, Optional, Sequence, Tuple

import attrs
import numpy as np
import pandas as pd

from . import __version__, analytics, artifacts, config, geometry, hybrid, padp, sage, synthesis, tracking
from .artifacts import ArtifactError, RunManifest

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_NUMERICAL = 3

FIGURES_DIR = "figures"
DELAY_SPREAD_SOURCES = ("per-angle", "deembedded")
EMPTY = {"status": "empty"}
# largest aperture dimension of the horn antennas
FAR_FIELD_APERTURE_M = 12.2e-3


class StageLogging:
    """Package log level and a stage-tagged stderr handler for one command."""

    def __init__(
        self,
        logger: logging.Logger,
        stage: str,
        quiet: bool = False,
        debug: bool = False,
        level: str = "INFO",
    ) -> None:
        self.logger = logger
        self.saved_level = logger.level
        if quiet:
            level = "WARNING"
        elif debug:
            level = "DEBUG"
        logger.setLevel(logging.getLevelName(level.upper()))
        self.handler: Optional[logging.Handler] = None
        if not logger.handlers:
            self.handler = logging.StreamHandler()
            self.handler.setFormatter(
                logging.Formatter(f"%(asctime)s %(levelname)s {stage}: %(message)s")
            )
            logger.addHandler(self.handler)

    def __enter__(self) -> logging.Logger:
        return self.logger

    def __exit__(
        self,
        exc_type: Optional[type[BaseException]],
        exc_val: Optional[BaseException],
        exc_tb: Optional[TracebackType],
    ) -> None:
        self.logger.setLevel(self.saved_level)
        if self.handler is not None:
            self.logger.removeHandler(self.handler)


def parse_poses(text: Optional[str], available: Sequence[int]) -> List[int]:
    """Parse ``"14"``, ``"1,3,5"`` or ``"1-28"`` into pose indices."""
    if not text:
        return sorted(available)
    poses: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            first, last = part.split("-", 1)
            poses.extend(range(int(first), int(last) + 1))
        else:
            poses.append(int(part))
    unknown = [pose for pose in poses if pose not in available]
    if unknown:
        raise geometry.SceneError(f"pose {unknown[0]} is not part of the scene")
    return sorted(set(poses))


def _artifact(out_dir: str, prefix: str, pose_index: int, suffix: str = "csv") -> str:
    return os.path.join(out_dir, f"{prefix}_pose{pose_index:02d}.{suffix}")


def _run_config(
    out_dir: str,
) -> Tuple[geometry.SounderConfig, sage.SageConfig, tracking.TrackerConfig]:
    return config.run_config_from_json(
        artifacts.read_json(os.path.join(out_dir, artifacts.RUN_CONFIG_FILE))
    )


def _scene(out_dir: str) -> geometry.SceneModel:
    return geometry.load_scene(os.path.join(out_dir, artifacts.SCENE_FILE))


def cmd_synth(
    out_dir: str,
    scene_path: Optional[str] = None,
    config_path: Optional[str] = None,
    poses: Optional[str] = None,
    seed: int = 0,
    noiseless: bool = False,
) -> RunManifest:
    scene = geometry.load_scene(scene_path) if scene_path else geometry.default_l_scene()
    scene.validate()
    if config_path:
        sounder, sage_cfg, tracker_cfg = config.load_run_config(config_path)
    else:
        sounder, sage_cfg, tracker_cfg = (
            geometry.SounderConfig(),
            sage.SageConfig(guard_delay_s=float(config.get_config("guard_delay_ns")) * 1e-9),
            tracking.TrackerConfig(),
        )
    if noiseless:
        sounder = attrs.evolve(sounder, add_noise=False)
    selected = parse_poses(poses, [pose.pose_index for pose in scene.trx_poses])

    os.makedirs(out_dir, exist_ok=True)
    artifacts.write_json(scene.to_json(), os.path.join(out_dir, artifacts.SCENE_FILE))
    artifacts.write_json(
        {
            "sounder": sounder.to_json(),
            "sage": attrs.asdict(sage_cfg),
            "tracker": attrs.asdict(tracker_cfg),
        },
        os.path.join(out_dir, artifacts.RUN_CONFIG_FILE),
    )
    outputs = [artifacts.SCENE_FILE, artifacts.RUN_CONFIG_FILE]
    for pose_index in selected:
        cfr = synthesis.synthesize_cfr(scene, scene.pose(pose_index), sounder, seed)
        outputs += artifacts.write_cfr(cfr, out_dir)
    manifest = RunManifest(
        scene=scene_path or "default-l-scene",
        config=config_path,
        poses=selected,
        seed=seed,
        version=__version__,
    )
    manifest.add_stage("synth", outputs)
    manifest.save(out_dir)
    logger.info(f"synthesized {len(selected)} poses into {out_dir}")
    return manifest


def cmd_estimate(
    out_dir: str,
    threshold_db: Optional[float] = None,
    window: Optional[str] = None,
    workers: Optional[int] = None,
) -> RunManifest:
    manifest = RunManifest.load(out_dir)
    manifest.require(out_dir, [artifacts.cfr_header_name(m) for m in manifest.poses])
    _, sage_cfg, _ = _run_config(out_dir)
    if threshold_db is not None:
        sage_cfg = attrs.evolve(sage_cfg, threshold_offset_db=threshold_db)
    window = window or config.get_config("window")
    workers = int(workers or config.get_config("workers"))
    datasets = [
        artifacts.read_cfr(os.path.join(out_dir, artifacts.cfr_header_name(m)))
        for m in manifest.poses
    ]
    outputs = []
    for cfr in datasets:
        estimates = sage.estimate_all(cfr, sage_cfg, workers=workers, window=window)
        path = _artifact(out_dir, "estimates", cfr.pose_index)
        artifacts.write_frame(estimates.to_frame(), path)
        outputs.append(os.path.basename(path))
    manifest.add_stage("estimate", outputs)
    manifest.save(out_dir)
    return manifest


def _load_estimates(out_dir: str, pose_index: int) -> sage.EstimateSet:
    header = artifacts.read_cfr_header(
        os.path.join(out_dir, artifacts.cfr_header_name(pose_index))
    )
    frame = artifacts.read_frame(
        _artifact(out_dir, "estimates", pose_index), sage.ESTIMATE_COLUMNS
    )
    try:
        return sage.EstimateSet.from_frame(frame, pose_index, header["angles"])
    except ValueError as exc:
        raise ArtifactError(f"pose {pose_index} estimates: {exc}") from exc


def _weights(
    est: sage.EstimateSet,
    scene: geometry.SceneModel,
    sounder: geometry.SounderConfig,
    tracker_cfg: tracking.TrackerConfig,
) -> Tuple[tracking.McdWeights, Dict[str, Any]]:
    pose = scene.pose(est.pose_index)
    try:
        reference = tracking.find_specular_reference(
            est,
            scene,
            pose,
            delay_gate_s=tracker_cfg.delay_gate_s,
            delay_bin_s=sounder.delay_resolution_s,
        )
    except tracking.CalibrationError as exc:
        logger.warning(f"{exc}; falling back to unit weights")
        return tracking.McdWeights(), {"reference_length": 0}
    weights = tracking.compute_weights(reference)
    return weights, {"reference_length": len(reference), **attrs.asdict(weights)}


def cmd_track(out_dir: str, gate_ns: Optional[float] = None) -> RunManifest:
    manifest = RunManifest.load(out_dir)
    scene = _scene(out_dir)
    sounder, _, tracker_cfg = _run_config(out_dir)
    if gate_ns is not None:
        tracker_cfg = attrs.evolve(tracker_cfg, delay_gate_s=gate_ns * 1e-9)
    estimates = [_load_estimates(out_dir, m) for m in manifest.poses]
    outputs = []
    for est in estimates:
        weights, summary = _weights(est, scene, sounder, tracker_cfg)
        trajs = tracking.track_trajectories(est, weights, tracker_cfg)
        deembedded = tracking.deembed(trajs, tracker_cfg.refine_azimuth)
        paths = [
            _artifact(out_dir, "trajectories", est.pose_index),
            _artifact(out_dir, "deembedded", est.pose_index),
            _artifact(out_dir, "weights", est.pose_index, "json"),
        ]
        artifacts.write_frame(tracking.trajectories_to_frame(trajs), paths[0])
        artifacts.write_frame(tracking.deembedded_to_frame(deembedded), paths[1])
        artifacts.write_json(summary, paths[2])
        outputs += [os.path.basename(path) for path in paths]
    manifest.add_stage("track", outputs)
    manifest.save(out_dir)
    return manifest


def _load_deembedded(out_dir: str, pose_index: int) -> List[tracking.DeembeddedMpc]:
    frame = artifacts.read_frame(
        _artifact(out_dir, "deembedded", pose_index), tracking.DEEMBEDDED_COLUMNS
    )
    return tracking.deembedded_from_frame(frame)


def _fit_or_empty(
    classified: Sequence[hybrid.ClassifiedMpc], relative_to_specular: bool
) -> Dict[str, Any]:
    try:
        return hybrid.fit_diffuse_model(classified, relative_to_specular).to_json()
    except hybrid.NumericalError as exc:
        logger.warning(f"diffuse fit skipped: {exc}")
        return dict(EMPTY)


def cmd_model(out_dir: str) -> RunManifest:
    manifest = RunManifest.load(out_dir)
    scene = _scene(out_dir)
    sounder, _, _ = _run_config(out_dir)
    per_pose = {m: _load_deembedded(out_dir, m) for m in manifest.poses}
    classify_kwargs = {"delay_bin_s": sounder.delay_resolution_s, "f_c": sounder.f_c_hz}
    outputs = []
    everything: List[hybrid.ClassifiedMpc] = []
    for pose_index, deembedded in per_pose.items():
        classified = hybrid.classify(deembedded, scene, scene.pose(pose_index), **classify_kwargs)
        everything += classified
        path = _artifact(out_dir, "classified", pose_index)
        artifacts.write_frame(hybrid.classified_to_frame(classified), path)
        outputs.append(os.path.basename(path))
    model = _fit_or_empty(everything, relative_to_specular=True)
    kinds = sorted({item.matched_feature.kind for item in everything if item.matched_feature})
    model["by_kind"] = {
        kind: _fit_or_empty(
            [i for i in everything if i.matched_feature and i.matched_feature.kind == kind],
            relative_to_specular=True,
        )
        for kind in kinds
        if kind != "corner"
    }
    model["absolute"] = _fit_or_empty(everything, relative_to_specular=False)
    consistency = hybrid.specular_power_consistency(per_pose, scene, **classify_kwargs)
    artifacts.write_json(model, os.path.join(out_dir, "diffuse_model.json"))
    artifacts.write_json(consistency.to_json(), os.path.join(out_dir, "specular_consistency.json"))
    manifest.add_stage("model", outputs + ["diffuse_model.json", "specular_consistency.json"])
    manifest.save(out_dir)
    return manifest


def _lognormal_section(values: Sequence[float], unit: str) -> Dict[str, Any]:
    if not values:
        return dict(EMPTY)
    section: Dict[str, Any] = {
        "count": len(values),
        "unit": unit,
        "mean": float(np.mean(values)),
        "median": float(np.median(values)),
        "zero_fraction": float(np.mean(np.asarray(values) == 0)),
    }
    try:
        section["lognormal"] = attrs.asdict(analytics.fit_lognormal(values))
    except ValueError:
        section["lognormal"] = dict(EMPTY)
    return section


def cmd_report(
    out_dir: str,
    emit_figures: bool = False,
    window: Optional[str] = None,
    delay_spread: str = DELAY_SPREAD_SOURCES[0],
) -> RunManifest:
    manifest = RunManifest.load(out_dir)
    scene = _scene(out_dir)
    sounder, _, _ = _run_config(out_dir)
    estimates = {m: _load_estimates(out_dir, m) for m in manifest.poses}
    trajectories = {
        m: tracking.trajectories_from_frame(
            artifacts.read_frame(_artifact(out_dir, "trajectories", m), tracking.TRAJECTORY_COLUMNS)
        )
        for m in manifest.poses
    }
    deembedded = {m: _load_deembedded(out_dir, m) for m in manifest.poses}
    model = artifacts.read_json(os.path.join(out_dir, "diffuse_model.json"))
    consistency = artifacts.read_json(os.path.join(out_dir, "specular_consistency.json"))
    classify_kwargs = {"delay_bin_s": sounder.delay_resolution_s, "f_c": sounder.f_c_hz}

    points: List[analytics.ReconPoint] = []
    classified_all: List[hybrid.ClassifiedMpc] = []
    delay_spreads: List[analytics.SpreadSample] = []
    angular_spreads: List[analytics.SpreadSample] = []
    for m in manifest.poses:
        pose = scene.pose(m)
        classified = hybrid.classify(deembedded[m], scene, pose, **classify_kwargs)
        classified_all += classified
        matched = [item.mpc for item in classified if item.label != hybrid.MpcLabel.UNMATCHED]
        points += analytics.reconstruct_environment(matched, pose)
        if delay_spread == "deembedded":
            delay_spreads += analytics.delay_spreads_from_deembedded(deembedded[m])
        else:
            delay_spreads += analytics.delay_spreads_per_angle(estimates[m])
        if deembedded[m]:
            angular_spreads.append(analytics.angular_spread_per_pose(deembedded[m], m))

    cdf = analytics.distance_error_cdf(points, scene)
    losses = analytics.reflection_loss_by_kind(
        classified_all, sounder.f_c_hz, sounder.antenna.boresight_gain_dbi
    )
    all_losses = analytics.reflection_loss_by_kind(
        classified_all, sounder.f_c_hz, sounder.antenna.boresight_gain_dbi, target_only=False
    )
    all_deembedded = [mpc for m in manifest.poses for mpc in deembedded[m]]
    report: Dict[str, Any] = {
        "version": __version__,
        "per_pose": {
            str(m): {
                "mpcs": estimates[m].n_mpcs,
                "trajectories": len(trajectories[m]),
                "deembedded": len(deembedded[m]),
            }
            for m in manifest.poses
        },
        "diffuse_fit": model if "n_diff" in model else dict(EMPTY),
        "specular_consistency": consistency if consistency.get("powers_db") else dict(EMPTY),
        "reconstruction": dict(EMPTY)
        if cdf.mean_m is None
        else {
            "points": len(points),
            "mean_error_m": cdf.mean_m,
            "fraction_below_2cm": analytics.fraction_below(cdf.errors_m, 0.02),
        },
        "reflection_loss": losses or dict(EMPTY),
        "reflection_loss_all": all_losses or dict(EMPTY),
        "delay_spread": _lognormal_section([s.value for s in delay_spreads], "ns"),
        "delay_spread_source": delay_spread,
        "angular_spread": _lognormal_section([s.value for s in angular_spreads], "deg"),
        "angular_spread_by_pose_group": dict(EMPTY)
        if not angular_spreads
        else {
            name: _lognormal_section([s.value for s in samples], "deg")
            for name, samples in analytics.spreads_by_pose_group(angular_spreads).items()
        },
        "far_field": dict(EMPTY)
        if not all_deembedded
        else {
            "distance_m": geometry.far_field_distance(FAR_FIELD_APERTURE_M, sounder.wavelength_m),
            "fraction_beyond": analytics.far_field_fraction(
                all_deembedded, FAR_FIELD_APERTURE_M, sounder.wavelength_m
            ),
        },
    }
    outputs = ["report.json"]
    if emit_figures:
        outputs += _emit_figures(
            out_dir,
            manifest,
            estimates,
            trajectories,
            points,
            cdf,
            analytics.reflection_loss_cdf(
                classified_all, sounder.f_c_hz, sounder.antenna.boresight_gain_dbi
            ),
            delay_spreads,
            angular_spreads,
            window,
        )
    artifacts.write_json(report, os.path.join(out_dir, "report.json"))
    manifest.add_stage("report", outputs)
    manifest.save(out_dir)
    return manifest


def _emit_figures(
    out_dir: str,
    manifest: RunManifest,
    estimates: Dict[int, sage.EstimateSet],
    trajectories: Dict[int, List[tracking.Trajectory]],
    points: List[analytics.ReconPoint],
    cdf: analytics.DistanceErrorCdf,
    losses: pd.DataFrame,
    delay_spreads: List[analytics.SpreadSample],
    angular_spreads: List[analytics.SpreadSample],
    window: Optional[str],
) -> List[str]:
    window = window or config.get_config("window")
    figures = os.path.join(out_dir, FIGURES_DIR)
    os.makedirs(figures, exist_ok=True)
    outputs = []
    for m in manifest.poses:
        cfr = artifacts.read_cfr(os.path.join(out_dir, artifacts.cfr_header_name(m)))
        measured = padp.compute_padp(cfr, window)
        rebuilt = np.array(
            [sage.reconstruct_row(angle, cfr.freqs_hz) for angle in estimates[m].angles]
        )
        rebuilt_padp = padp.compute_padp(attrs.evolve(cfr, data=rebuilt), window)
        for name, profile in (("padp", measured), ("reconstructed_padp", rebuilt_padp)):
            path = _artifact(figures, name, m)
            artifacts.write_frame(profile.to_frame(), path)
            outputs.append(os.path.join(FIGURES_DIR, os.path.basename(path)))
        path = _artifact(figures, "trajectories", m)
        artifacts.write_frame(tracking.trajectories_figure_frame(trajectories[m]), path)
        outputs.append(os.path.join(FIGURES_DIR, os.path.basename(path)))
    tables = {
        "point_cloud.csv": analytics.points_to_frame(points),
        "distance_error_cdf.csv": cdf.to_frame(),
        "reflection_loss_cdf.csv": losses,
        "delay_spreads.csv": analytics.spreads_to_frame(delay_spreads, "angle_deg"),
        "angular_spreads.csv": analytics.spreads_to_frame(angular_spreads, "pose_index"),
    }
    for name, frame in tables.items():
        artifacts.write_frame(frame, os.path.join(figures, name))
        outputs.append(os.path.join(FIGURES_DIR, name))
    logger.info(f"wrote {len(outputs)} figure tables")
    return outputs


def run_all(args: argparse.Namespace) -> RunManifest:
    cmd_synth(args.out, args.scene, args.config, args.poses, args.seed, args.noiseless)
    cmd_estimate(args.out, args.threshold_db, args.window, args.workers)
    cmd_track(args.out, args.gate_ns)
    cmd_model(args.out)
    return cmd_report(args.out, args.emit_figures, args.window, args.delay_spread)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="artifact directory")
    common.add_argument("--debug", action="store_true")
    common.add_argument("--quiet", action="store_true")

    synth = argparse.ArgumentParser(add_help=False)
    synth.add_argument("--scene", help="scene JSON file, default L-shaped laboratory")
    synth.add_argument("--config", help="run configuration JSON file")
    synth.add_argument("--poses", help="pose selection such as 14, 1,3 or 1-28")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--noiseless", action="store_true")

    estimate = argparse.ArgumentParser(add_help=False)
    estimate.add_argument("--threshold-db", type=float, help="detection threshold above the floor")
    estimate.add_argument("--window", choices=padp.WINDOWS)
    estimate.add_argument("--workers", type=int)

    track = argparse.ArgumentParser(add_help=False)
    track.add_argument("--gate-ns", type=float, help="delay gate between adjacent angles")

    report = argparse.ArgumentParser(add_help=False)
    report.add_argument("--emit-figures", action="store_true")
    report.add_argument(
        "--delay-spread",
        choices=DELAY_SPREAD_SOURCES,
        default=DELAY_SPREAD_SOURCES[0],
        help="per-angle estimates or de-embedded MPCs binned by azimuth",
    )

    parser = argparse.ArgumentParser(prog="thz-sensing", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("synth", parents=[common, synth])
    commands.add_parser("estimate", parents=[common, estimate])
    commands.add_parser("track", parents=[common, track])
    commands.add_parser("model", parents=[common])
    report_parser = commands.add_parser("report", parents=[common, report])
    report_parser.add_argument("--window", choices=padp.WINDOWS)
    commands.add_parser("run-all", parents=[common, synth, estimate, track, report])
    return parser


def dispatch(args: argparse.Namespace) -> RunManifest:
    if args.command == "synth":
        return cmd_synth(args.out, args.scene, args.config, args.poses, args.seed, args.noiseless)
    if args.command == "estimate":
        return cmd_estimate(args.out, args.threshold_db, args.window, args.workers)
    if args.command == "track":
        return cmd_track(args.out, args.gate_ns)
    if args.command == "model":
        return cmd_model(args.out)
    if args.command == "report":
        return cmd_report(args.out, args.emit_figures, args.window, args.delay_spread)
    return run_all(args)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    package_logger = logging.getLogger("thz_sensing")
    level = str(config.get_config("log_level"))
    with StageLogging(package_logger, args.command, args.quiet, args.debug, level):
        try:
            dispatch(args)
        except (ValueError, FileNotFoundError, KeyError) as exc:
            logger.error(f"{type(exc).__name__}: {exc}")
            return EXIT_BAD_INPUT
        except RuntimeError as exc:
            logger.error(f"{type(exc).__name__}: {exc}")
            return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
