"""
Harness Service
End-to-end experiment driver: floor, mapping runs, map, evaluation runs,
localization, metrics and reports. ExperimentService exposes each stage to
the command line.
"""
import os
import glob
import math
import time
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from config import PALETTE, load_config
from ui.report import ReportUI
from . import mapdb
from .detector import DetectorParams, PaletteSegmenter, SegmentationDetector
from .descriptor import HistogramDescriptor, export_training_clusters
from .floorsim import (CameraModel, FloorSpec, PoseLog, RenderedRun, generate_eval_run,
                       generate_floor, generate_mapping_run, load_floor, load_run,
                       perturb_log, persist_run, save_floor)
from .geometry import RansacParams, pose_delta
from .localizer import LocalizationParams, Localizer, read_predictions, write_predictions
from .mapper import ClusterParams, MappingParams, OutlierFilterParams, build_map

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ['area_m2', 'n_frames', 'psr', 'tsr', 'mean_pos_err_m', 'mean_angle_err_deg',
                   'mean_pos_err_true_m', 'psr_tsr_gap', 'sec_per_frame']
RECORD_COLUMNS = ['frame_id', 'status', 'x', 'y', 'theta', 'truth_x', 'truth_y', 'truth_theta',
                  'pos_err_m', 'angle_err_deg', 'true_success']

SUMMARY_FILE = 'summary.csv'
PER_FRAME_FILE = 'per_frame.csv'
PREDICTIONS_FILE = 'predictions.csv'
TRAJECTORY_SVG = 'trajectory.svg'
TRAJECTORY_HTML = 'trajectory.html'
FLOOR_FILE = 'floor.kflt'
MAP_FILE = 'map.kmap'
RUNS_DIR = 'runs'


class FrameAlignmentError(ValueError):
    """Predictions and ground truth do not cover the same frame ids."""


class StageError(RuntimeError):
    """An experiment stage failed; `stage` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"Stage '{stage}' failed: {cause}")
        self.stage = stage


@dataclass(frozen=True)
class SuccessGates:
    max_position_error: float = 0.10
    max_angle_error: float = math.radians(20.0)

    def __post_init__(self):
        if not (self.max_position_error > 0 and self.max_angle_error > 0):
            raise ValueError("Success gates must be positive")

    def admits(self, position_error, angle_error):
        return position_error <= self.max_position_error and angle_error <= self.max_angle_error


@dataclass
class RunMetrics:
    """
    Aggregates of one evaluation run. Mean errors are over true successes;
    the *_predicted variants average over every produced pose.
    """
    n_frames: int
    n_predicted: int
    n_true_success: int
    psr: float
    tsr: float
    mean_position_error: float
    mean_angle_error: float
    mean_position_error_predicted: float
    mean_angle_error_predicted: float
    records: pd.DataFrame = field(repr=False)
    area_m2: float = math.nan
    sec_per_frame: float = math.nan

    @property
    def psr_tsr_gap(self):
        return self.psr - self.tsr

    def summary_row(self):
        return {
            'area_m2': self.area_m2,
            'n_frames': self.n_frames,
            'psr': self.psr,
            'tsr': self.tsr,
            'mean_pos_err_m': self.mean_position_error_predicted,
            'mean_angle_err_deg': math.degrees(self.mean_angle_error),
            'mean_pos_err_true_m': self.mean_position_error,
            'psr_tsr_gap': self.psr_tsr_gap,
            'sec_per_frame': self.sec_per_frame,
        }

    def to_dict(self):
        row = self.summary_row()
        row.update({'n_predicted': self.n_predicted, 'n_true_success': self.n_true_success})
        return row


def _mean(values):
    return float(np.mean(values)) if len(values) else math.nan


def evaluate_run(predictions, truth, gates=SuccessGates()):
    """
    Score predictions against ground truth.

    Args:
        predictions (list): LocalizationResults, one per truth frame
        truth (PoseLog): Recorded ground truth
        gates (SuccessGates): True-success gates

    Returns:
        RunMetrics: PSR, TSR, mean errors and per-frame records

    Raises:
        FrameAlignmentError: frame ids differ between predictions and truth
    """
    predicted_ids = sorted(int(r.frame_id) for r in predictions)
    truth_ids = sorted(int(f) for f in truth.frame_ids)
    if predicted_ids != truth_ids:
        missing = set(truth_ids) - set(predicted_ids)
        extra = set(predicted_ids) - set(truth_ids)
        raise FrameAlignmentError(
            f"Frame ids do not align: {len(missing)} without prediction, {len(extra)} without truth"
            + (" (duplicates)" if not missing and not extra else "")
        )

    rows = []
    for r in sorted(predictions, key=lambda r: r.frame_id):
        expected = truth.pose_of(r.frame_id)
        row = {
            'frame_id': int(r.frame_id), 'status': r.status,
            'x': math.nan, 'y': math.nan, 'theta': math.nan,
            'truth_x': expected.x, 'truth_y': expected.y, 'truth_theta': expected.theta,
            'pos_err_m': math.nan, 'angle_err_deg': math.nan, 'true_success': False,
        }
        if r.success:
            distance, angle = pose_delta(r.pose, expected)
            row.update({
                'x': r.pose.x, 'y': r.pose.y, 'theta': r.pose.theta,
                'pos_err_m': distance, 'angle_err_deg': math.degrees(angle),
                'true_success': gates.admits(distance, angle),
            })
        rows.append(row)
    records = pd.DataFrame(rows, columns=RECORD_COLUMNS)

    n = len(records)
    predicted = records[(records['status'] == 'ok').to_numpy(dtype=bool)]
    true = records[records['true_success'].to_numpy(dtype=bool)]
    return RunMetrics(
        n_frames=n,
        n_predicted=len(predicted),
        n_true_success=len(true),
        psr=len(predicted) / n if n else 0.0,
        tsr=len(true) / n if n else 0.0,
        mean_position_error=_mean(true['pos_err_m']),
        mean_angle_error=math.radians(_mean(true['angle_err_deg'])),
        mean_position_error_predicted=_mean(predicted['pos_err_m']),
        mean_angle_error_predicted=math.radians(_mean(predicted['angle_err_deg'])),
        records=records,
    )


def _write_csv(df, path):
    try:
        df.to_csv(path, index=False, float_format='%.6f', na_rep='', lineterminator='\n')
    except OSError as e:
        raise OSError(f"Cannot write '{path}': {e}") from e


def emit_report(metrics, truth, predictions, directory, area_m2=None):
    """
    Write the report of one evaluated run.

    Args:
        metrics (RunMetrics): Evaluated metrics
        truth (PoseLog): Ground truth
        predictions (list): LocalizationResults
        directory (str): Output directory
        area_m2 (float, optional): Area label for the summary row

    Returns:
        dict: Written file paths by kind
    """
    os.makedirs(directory, exist_ok=True)
    if area_m2 is not None:
        metrics.area_m2 = area_m2
    ui = ReportUI()
    paths = {kind: os.path.join(directory, name) for kind, name in (
        ('summary', SUMMARY_FILE), ('per_frame', PER_FRAME_FILE), ('predictions', PREDICTIONS_FILE),
        ('svg', TRAJECTORY_SVG), ('html', TRAJECTORY_HTML))}

    _write_csv(pd.DataFrame([metrics.summary_row()], columns=SUMMARY_COLUMNS), paths['summary'])
    _write_csv(metrics.records, paths['per_frame'])
    write_predictions(sorted(predictions, key=lambda r: r.frame_id), paths['predictions'])
    try:
        with open(paths['svg'], 'w', encoding='utf-8') as f:
            f.write(ui.trajectory_svg(truth, predictions))
        ui.trajectory_chart(truth, predictions).save(paths['html'])
    except OSError as e:
        raise OSError(f"Cannot write trajectory plots in '{directory}': {e}") from e

    logger.info("Report written to %s", directory)
    return paths


def floor_spec_from(cfg):
    return FloorSpec(cfg['FLOOR_WIDTH'], cfg['FLOOR_HEIGHT'], cfg['BLOB_DENSITY'],
                     (cfg['BLOB_RADIUS_MIN_MM'], cfg['BLOB_RADIUS_MAX_MM']),
                     tuple(cfg['COLOR_WEIGHTS']), cfg['SEED'])


def detector_from(cfg):
    params = DetectorParams(cfg['BORDER_MARGIN'], cfg['MIN_BLOB_AREA'], cfg['SUPPORT_RADIUS'],
                            cfg['MIN_SUPPORT_PIXELS'])
    return SegmentationDetector(PaletteSegmenter(PALETTE, cfg['SEG_MAX_DISTANCE']), params)


def mapping_params_from(cfg, keep_patches=False):
    return MappingParams(
        OutlierFilterParams(cfg['OUTLIER_WINDOW'], cfg['OUTLIER_ALPHA'], cfg['OUTLIER_SIGMA_FLOOR']),
        ClusterParams(cfg['CLUSTER_RADIUS'], cfg['CLUSTER_COSINE'], cfg['CLUSTER_MIN_MEMBERS']),
        keep_patches=keep_patches,
        workers=cfg['WORKERS'],
    )


def localization_params_from(cfg):
    return LocalizationParams(
        k=cfg['KNN_K'],
        mode_radius=cfg['MODE_RADIUS'],
        min_filtered_matches=cfg['MIN_FILTERED_MATCHES'],
        ransac=RansacParams(cfg['RANSAC_MIN_SAMPLES'], cfg['RANSAC_RESIDUAL'], cfg['RANSAC_MAX_TRIALS']),
        seed=cfg['SEED'],
        knn_mode='exact' if cfg['EXACT_KNN'] else 'auto',
    )


def gates_from(cfg):
    return SuccessGates(cfg['MAX_POS_ERROR'], math.radians(cfg['MAX_ANGLE_ERROR_DEG']))


def tile_origins(cfg):
    """Lower-left corners of the mapping tiles covering the floor; the last row and column sit flush with the edge."""
    width, height = cfg['FLOOR_WIDTH'], cfg['FLOOR_HEIGHT']
    tile = min(cfg['MAP_TILE'], width, height)

    def starts(extent):
        n = max(1, math.ceil(round(extent / tile, 9)))
        return [min(i * tile, extent - tile) for i in range(n)]

    return tile, [(x, y) for y in starts(height) for x in starts(width)]


def area_bounds(cfg, area_m2):
    side = math.sqrt(area_m2)
    return (0.0, 0.0, min(side, cfg['FLOOR_WIDTH']), min(side, cfg['FLOOR_HEIGHT']))


def path_seed(cfg, area_idx, run_idx):
    return int(cfg['SEED']) * 1_000_003 + area_idx * 1009 + run_idx


def mapping_logs(cfg, floor, cam):
    tile, origins = tile_origins(cfg)
    return [
        generate_mapping_run(floor, cam, tile, cfg['LANE_SPACING'], cfg['MAPPING_SPEED'],
                             cfg['CAPTURE_RATE'], origin)
        for origin in origins
    ]


def evaluation_logs(cfg, floor, cam, area_idx, area_m2):
    """
    Clean path and recorded (noisy) ground truth of one area's evaluation runs.

    Returns:
        tuple: (clean PoseLog, truth PoseLog), both concatenated over EVAL_RUNS
    """
    bounds = area_bounds(cfg, area_m2)
    clean, truth = [], []
    for run_idx in range(cfg['EVAL_RUNS']):
        seed = path_seed(cfg, area_idx, run_idx)
        log = generate_eval_run(floor, cam, bounds, seed, cfg['EVAL_FRAMES'], cfg['EVAL_SPEED'],
                                cfg['CAPTURE_RATE'])
        clean.append(log)
        truth.append(perturb_log(log, cfg['POSE_NOISE_SIGMA'], [seed, 1]))
    return PoseLog.concat(clean), PoseLog.concat(truth)


def _stage(name, fn, *args, **kwargs):
    logger.info("Stage: %s", name)
    try:
        return fn(*args, **kwargs)
    except Exception as e:
        raise StageError(name, e) from e


@dataclass
class ExperimentResult:
    metrics: dict
    summary: pd.DataFrame
    database: object = field(repr=False, default=None)


def run_experiment(cfg, out_dir=None):
    """
    Run the whole pipeline for one configuration.

    Args:
        cfg (dict): Configuration from config.load_config
        out_dir (str, optional): Report directory; nothing is written when None

    Returns:
        ExperimentResult: RunMetrics per area, summary table and the map

    Raises:
        StageError: labelled with the failing stage
    """
    cam = CameraModel()
    seed = cfg['SEED']
    detector = detector_from(cfg)
    descriptor = HistogramDescriptor(cam)

    floor = _stage('floor', generate_floor, floor_spec_from(cfg))
    logs = _stage('mapping runs', mapping_logs, cfg, floor, cam)
    runs = [(RenderedRun(floor, cam, log, cfg['NOISE_SIGMA'], seed + i), log) for i, log in enumerate(logs)]
    db = _stage('map', build_map, runs, detector, descriptor, mapping_params_from(cfg), cam,
                {'seed': seed})

    localizer = Localizer(db, detector, descriptor, localization_params_from(cfg), cam)
    gates = gates_from(cfg)
    per_area = {}
    for area_idx, area_m2 in enumerate(cfg['AREAS']):
        label = f"evaluation {area_m2:g} m²"
        clean, truth = _stage(label, evaluation_logs, cfg, floor, cam, area_idx, area_m2)
        frames = RenderedRun(floor, cam, clean, cfg['NOISE_SIGMA'], seed + 100_000 + area_idx)

        started = time.perf_counter()
        results = _stage(label, localizer.localize_all, frames, cfg['WORKERS'])
        elapsed = time.perf_counter() - started

        metrics = _stage(label, evaluate_run, results, truth, gates)
        metrics.area_m2 = area_m2
        if cfg['RECORD_TIMING'] and len(results):
            metrics.sec_per_frame = elapsed / len(results)
        per_area[area_m2] = metrics
        logger.info("Area %g m²: PSR %.3f, TSR %.3f", area_m2, metrics.psr, metrics.tsr)

        if out_dir is not None:
            _stage('report', emit_report, metrics, truth, results,
                   os.path.join(out_dir, f"area_{area_m2:g}m2"))

    summary = pd.DataFrame([m.summary_row() for m in per_area.values()], columns=SUMMARY_COLUMNS)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_csv(summary, os.path.join(out_dir, SUMMARY_FILE))
    return ExperimentResult(per_area, summary, db)


class ExperimentService:
    """One method per command-line stage; each returns a success/message/data dict."""

    def __init__(self, cfg=None):
        """Initialize the Experiment Service."""
        self.cfg = cfg or load_config()
        self.cam = CameraModel()
        self.ui = ReportUI()

    def _failure(self, action, e):
        logger.error("%s failed: %s", action, e, exc_info=logger.isEnabledFor(logging.DEBUG))
        return {"success": False, "message": f"❌ {action} failed: {e}", "data": {}}

    def _floor(self, out_dir):
        path = os.path.join(out_dir, FLOOR_FILE)
        if os.path.exists(path):
            return load_floor(path)
        return generate_floor(floor_spec_from(self.cfg))

    def gen_floor(self, out_dir):
        """
        Generate the floor and save it as KFLT.

        Args:
            out_dir (str): Output directory

        Returns:
            dict: Result containing success status and message
        """
        try:
            os.makedirs(out_dir, exist_ok=True)
            floor = generate_floor(floor_spec_from(self.cfg))
            path = os.path.join(out_dir, FLOOR_FILE)
            save_floor(floor, path)
            return {
                "success": True,
                "message": f"✅ Floor with {len(floor)} blobs written to {path}",
                "data": {"path": path, "blobs": len(floor)},
            }
        except Exception as e:
            return self._failure("Floor generation", e)

    def gen_runs(self, out_dir):
        """
        Render and persist the mapping runs and every area's evaluation runs.
        Evaluation frames show the clean path; their pose CSV holds the noisy
        recorded ground truth.

        Args:
            out_dir (str): Directory holding (or receiving) floor.kflt

        Returns:
            dict: Result containing success status and message
        """
        try:
            floor = self._floor(out_dir)
            seed = self.cfg['SEED']
            written = []
            for i, log in enumerate(mapping_logs(self.cfg, floor, self.cam)):
                frames = RenderedRun(floor, self.cam, log, self.cfg['NOISE_SIGMA'], seed + i)
                written.append(persist_run(frames, log, os.path.join(out_dir, RUNS_DIR, f"mapping_{i:02d}")))
            for area_idx, area_m2 in enumerate(self.cfg['AREAS']):
                clean, truth = evaluation_logs(self.cfg, floor, self.cam, area_idx, area_m2)
                frames = RenderedRun(floor, self.cam, clean, self.cfg['NOISE_SIGMA'],
                                     seed + 100_000 + area_idx)
                written.append(persist_run(frames, truth,
                                           os.path.join(out_dir, RUNS_DIR, f"eval_{area_m2:g}m2")))
            return {
                "success": True,
                "message": f"✅ Wrote {len(written)} runs to {os.path.join(out_dir, RUNS_DIR)}",
                "data": {"runs": written},
            }
        except Exception as e:
            return self._failure("Run generation", e)

    def build_map(self, out_dir, run_dirs=None, export_dir=None):
        """
        Build and save the map from persisted mapping runs.

        Args:
            out_dir (str): Output directory
            run_dirs (list, optional): Run directories; defaults to runs/mapping_*
            export_dir (str, optional): Also export clustered patches here as
                descriptor training data

        Returns:
            dict: Result containing success status and message
        """
        try:
            run_dirs = run_dirs or sorted(glob.glob(os.path.join(out_dir, RUNS_DIR, 'mapping_*')))
            if not run_dirs:
                raise FileNotFoundError(f"No mapping runs under {os.path.join(out_dir, RUNS_DIR)}")
            runs = [load_run(d) for d in run_dirs]
            exporting = export_dir is not None
            built = build_map(runs, detector_from(self.cfg), HistogramDescriptor(self.cam),
                              mapping_params_from(self.cfg, keep_patches=exporting), self.cam,
                              {'seed': self.cfg['SEED']}, return_clusters=exporting)
            db, clusters = built if exporting else (built, None)
            path = os.path.join(out_dir, MAP_FILE)
            mapdb.save(db, path)
            data = {"path": path, "entries": len(db)}
            message = f"✅ Map with {len(db)} entries written to {path}"
            if exporting:
                manifest = export_training_clusters(clusters, export_dir, seed=self.cfg['SEED'])
                data["exported_patches"] = len(manifest)
                message += f"; {len(manifest)} training patches in {export_dir}"
            return {"success": True, "message": message, "data": data}
        except Exception as e:
            return self._failure("Map building", e)

    def localize(self, out_dir, run_dir, map_path=None):
        """
        Localize every frame of a persisted run.

        Args:
            out_dir (str): Output directory for predictions.csv
            run_dir (str): Run to localize
            map_path (str, optional): KMAP file; defaults to out_dir/map.kmap

        Returns:
            dict: Result containing success status and message
        """
        try:
            db = mapdb.load(map_path or os.path.join(out_dir, MAP_FILE))
            frames, log = load_run(run_dir)
            localizer = Localizer(db, detector_from(self.cfg), HistogramDescriptor(self.cam),
                                  localization_params_from(self.cfg), self.cam)
            results = localizer.localize_all(frames, self.cfg['WORKERS'])
            os.makedirs(out_dir, exist_ok=True)
            path = os.path.join(out_dir, PREDICTIONS_FILE)
            write_predictions(results, path)
            succeeded = sum(r.success for r in results)
            return {
                "success": True,
                "message": f"✅ Localized {succeeded}/{len(results)} frames, predictions in {path}",
                "data": {"path": path, "frames": len(results), "predicted": succeeded},
            }
        except Exception as e:
            return self._failure("Localization", e)

    def evaluate(self, out_dir, run_dir, predictions_path=None):
        """
        Evaluate a prediction CSV against a run's ground truth and write the report.

        Args:
            out_dir (str): Report directory
            run_dir (str): Run holding the ground truth
            predictions_path (str, optional): Defaults to out_dir/predictions.csv

        Returns:
            dict: Result containing success status and message
        """
        try:
            predictions = read_predictions(predictions_path or os.path.join(out_dir, PREDICTIONS_FILE))
            _, truth = load_run(run_dir)
            metrics = evaluate_run(predictions, truth, gates_from(self.cfg))
            emit_report(metrics, truth, predictions, out_dir)
            summary = pd.DataFrame([metrics.summary_row()], columns=SUMMARY_COLUMNS)
            return {
                "success": True,
                "message": self.ui.format_summary(summary),
                "data": metrics.to_dict(),
            }
        except Exception as e:
            return self._failure("Evaluation", e)

    def experiment(self, out_dir):
        """
        Run the full experiment and write reports.

        Args:
            out_dir (str): Output directory

        Returns:
            dict: Result containing success status and message
        """
        try:
            result = run_experiment(self.cfg, out_dir)
            return {
                "success": True,
                "message": self.ui.format_summary(result.summary),
                "data": {"summary": result.summary.to_dict('records'), "entries": len(result.database)},
            }
        except Exception as e:
            return self._failure("Experiment", e)
