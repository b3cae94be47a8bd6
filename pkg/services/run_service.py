# services/run_service.py
import hashlib
import json
import logging
import os
import shutil
import time
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from dotenv import load_dotenv
from pydantic import ValidationError

from schemas import LossReport, ProblemPreset, RunConfig, RunSummary, TrainConfig
from services.exceptions import ConfigError
from services.fea_service import Material, full_scale_verify, refine_field, refine_problem, solve_structure
from services.homogenization_service import bulk_modulus, hs_upper_bound
from services.neural_field import build_coordinates, canonical_json, forward
from services.objectives_service import base_cell_l1, evaluate_cells, rmse_of
from services.postprocess_service import (
    PostprocessService,
    protection_mask,
    provenance_comment,
    read_pgm,
    write_pgm,
)
from services.preset_service import ProblemSetup, get_preset, setup_problem
from services.training_service import (
    Checkpoint,
    TrainingService,
    load_checkpoint,
    network_from_config,
    read_epoch_log,
    save_checkpoint,
    write_epoch_log,
)

load_dotenv()

logger = logging.getLogger(__name__)

CONFIG_FILE = "run_config.json"
CHECKPOINT_FILE = "checkpoint.json"
EPOCH_LOG_FILE = "epochs.csv"
SUMMARY_FILE = "summary.json"


# ----------------------------------------------------------------------------
# Metrics
# ----------------------------------------------------------------------------

def delta_metric(u: np.ndarray, u_t: np.ndarray) -> float:
    """sqrt(sum (u - u_t)^2) / sum(u_t^2)"""
    u, u_t = np.asarray(u, dtype=float), np.asarray(u_t, dtype=float)
    if u.shape != u_t.shape:
        raise ValueError(f"fields differ in length: {u.shape} vs {u_t.shape}")
    denom = float(np.sum(u_t ** 2))
    if denom == 0.0:
        raise ValueError("target field is zero")
    return float(np.sqrt(np.sum((u - u_t) ** 2)) / denom)


def delta_normalized(u: np.ndarray, u_t: np.ndarray) -> float:
    """Dimensionless companion sqrt(sum (u - u_t)^2 / sum u_t^2)"""
    u, u_t = np.asarray(u, dtype=float), np.asarray(u_t, dtype=float)
    denom = float(np.sum(u_t ** 2))
    if denom == 0.0:
        raise ValueError("target field is zero")
    return float(np.sqrt(np.sum((u - u_t) ** 2) / denom))


def rmse(u: np.ndarray, u_t: np.ndarray, mask: np.ndarray) -> float:
    u, u_t = np.asarray(u), np.asarray(u_t)
    if u.shape != u_t.shape:
        raise ValueError(f"fields differ in length: {u.shape} vs {u_t.shape}")
    return rmse_of(u, u_t, mask)


def percent_hs_report(tensors: Sequence[np.ndarray], volumes: Sequence[float],
                      material: Material = Material()) -> Tuple[List[float], float]:
    """%HS per cell against the bound at the cell's actual volume fraction, plus the mean"""
    per_cell = [100.0 * bulk_modulus(t) / hs_upper_bound(float(v), material) for t, v in zip(tensors, volumes)]
    return per_cell, float(np.mean(per_cell)) if per_cell else 0.0


# ----------------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------------

def _field_path(err: dict, prefix: str = "") -> str:
    loc = ".".join(str(p) for p in err.get("loc", ()))
    return f"{prefix}.{loc}" if prefix and loc else (prefix or loc)


def _config_error(e: ValidationError, prefix: str = "") -> ConfigError:
    first = e.errors()[0]
    return ConfigError(first["msg"], field_path=_field_path(first, prefix))


def parse_run_config(payload: Union[str, dict]) -> RunConfig:
    try:
        data = json.loads(payload) if isinstance(payload, str) else payload
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON ({e})")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise _config_error(e)


def load_run_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    return parse_run_config(path.read_text())


def config_hash(config: RunConfig) -> str:
    """Digest of everything that shapes the design; run name and output location are left out"""
    record = config.model_dump(mode="json", exclude={"run_name", "output_dir"})
    return hashlib.sha256(canonical_json(record).encode("utf-8")).hexdigest()


def resolve_preset(config: RunConfig) -> ProblemPreset:
    preset = get_preset(config.preset)
    if not config.overrides:
        return preset
    unknown = set(config.overrides) - set(ProblemPreset.model_fields)
    if unknown:
        raise ConfigError(f"unknown preset fields {sorted(unknown)}", field_path="overrides")
    try:
        return ProblemPreset.model_validate({**preset.model_dump(), **config.overrides})
    except ValidationError as e:
        raise _config_error(e, "overrides")


def resolve_train(config: RunConfig, preset: ProblemPreset) -> TrainConfig:
    return config.train or preset.train


# ----------------------------------------------------------------------------
# Recomputing a summary from the artifacts of a run directory
# ----------------------------------------------------------------------------

def _design_file(upsample: int) -> str:
    return f"design_x{upsample}.pgm"


def _homogenized_state(setup: ProblemSetup, checkpoint: Checkpoint, train: TrainConfig):
    """Cell grid of the checkpointed network sampled at the cell centers"""
    coords = build_coordinates(setup.macro_dims, setup.micro_dims, 1)
    rho = coords.to_cells(forward(checkpoint.net, coords))
    return evaluate_cells(rho, setup.macro_dims, setup.material, train.penal, train.c0,
                          setup.problem.passive_void, setup.problem.passive_solid)


def verify_raster(raster: np.ndarray, setup: ProblemSetup, upsample: int, train: TrainConfig,
                  require_connected: bool = True):
    mx, my = setup.micro_dims
    factor = (mx * upsample, my * upsample)
    problem_px = refine_problem(setup.problem, factor)
    target_px, mask_px = refine_field(setup.target, setup.mask, setup.problem.nel, factor)
    return full_scale_verify(raster, problem_px, target_px, mask_px, setup.material,
                             train.penal, train.c0, require_connected)


def compute_metrics(run_dir: Union[str, Path]) -> RunSummary:
    """Every number is rebuilt from the saved config, checkpoint, epoch log and rasters"""
    run_dir = Path(run_dir)
    config = load_run_config(run_dir / CONFIG_FILE)
    preset = resolve_preset(config)
    train = resolve_train(config, preset)
    setup = setup_problem(preset)
    checkpoint = load_checkpoint(run_dir / CHECKPOINT_FILE)

    summary = RunSummary(
        run_name=config.run_name or run_dir.name,
        preset=preset.name,
        mode=train.mode or preset.mode,
        config_hash=checkpoint.config_hash,
        seed=train.seed,
        epochs=checkpoint.epoch,
        artifacts={"config": CONFIG_FILE, "checkpoint": CHECKPOINT_FILE},
    )

    log_path = run_dir / EPOCH_LOG_FILE
    if log_path.exists():
        rows = read_epoch_log(log_path)
        summary.artifacts["epoch_log"] = EPOCH_LOG_FILE
        if rows:
            last = rows[-1]
            summary.final_losses = LossReport(**last)

    grid = _homogenized_state(setup, checkpoint, train)
    active = grid.active
    summary.cell_volumes = grid.cell_volumes.tolist()

    if setup.target is not None:
        u = solve_structure(setup.problem, grid.tensors).u
        summary.rmse = rmse(u, setup.target, setup.mask)
        if preset.target.kind == "base_cell":
            summary.delta = delta_metric(u[setup.mask], setup.target[setup.mask])
            summary.delta_normalized = delta_normalized(u[setup.mask], setup.target[setup.mask])
    if setup.band is not None and setup.base_cell is not None:
        summary.base_cell_deviation = base_cell_l1(grid.rho, setup.base_cell, setup.band & active).value

    per_cell, mean_hs = percent_hs_report(grid.tensors[active], grid.cell_volumes[active], setup.material)
    summary.percent_hs = per_cell
    summary.mean_percent_hs = mean_hs

    post = PostprocessService()
    for s in config.render.upsample:
        path = run_dir / _design_file(s)
        if not path.exists():
            continue
        raster, _ = read_pgm(path)
        summary.artifacts[f"design_x{s}"] = path.name
        report = post.connectivity_metric(raster, 0.5, (setup.micro_dims[1] * s, setup.micro_dims[0] * s))
        summary.connectivity[f"x{s}"] = report.as_dict()
        for suffix in ("islands", "cleaned"):
            extra = run_dir / f"design_x{s}_{suffix}.pgm"
            if extra.exists():
                summary.artifacts[f"design_x{s}_{suffix}"] = extra.name

    if config.verify.enabled and setup.target is not None:
        s = config.verify.upsample
        raster, _ = read_pgm(run_dir / _design_file(s))
        report = verify_raster(raster, setup, s, train, config.verify.require_connected)
        summary.rmse_full_scale = report.rmse
        summary.mean_signed_error = report.mean_signed_error
        summary.full_scale_connected = report.connected

    summary_path = run_dir / SUMMARY_FILE
    if summary_path.exists():
        summary.wall_time_s = float(json.loads(summary_path.read_text()).get("wall_time_s", 0.0))
    return summary


# ----------------------------------------------------------------------------
# Orchestration
# ----------------------------------------------------------------------------

class RunService:
    """train -> render -> postprocess -> verify -> metrics, written into one run directory"""

    def __init__(self, output_root: Optional[Union[str, Path]] = None, registry=None, verbose: bool = True):
        self.output_root = Path(output_root or os.getenv("TOPONET_OUTPUT_ROOT", "./runs"))
        self.registry = registry
        self.verbose = verbose

    def _render_artifacts(self, staging: Path, checkpoint: Checkpoint, setup: ProblemSetup,
                          config: RunConfig, upsamples: Sequence[int]) -> None:
        mx, my = setup.micro_dims
        comment = provenance_comment(checkpoint.config_hash, checkpoint.epoch)
        post = PostprocessService(config.render.pixel_budget)
        for s in upsamples:
            design = post.render(checkpoint.net, setup.macro_dims, setup.micro_dims, s,
                                      checkpoint.config_hash, checkpoint.epoch)
            write_pgm(staging / _design_file(s), design.raster, comment)
            if self.verbose:
                print(f"🖼️  Rendered {_design_file(s)} ({design.raster.shape[1]}x{design.raster.shape[0]})")
            if not config.postprocess.enabled:
                continue
            pp = config.postprocess
            protect = protection_mask(setup.problem, (mx * s, my * s))
            islands = post.remove_islands(design, pp.low, pp.min_area, protect)
            cleaned = post.remove_dangling(design, pp.low, pp.high, pp.min_area, pp.dilation, protect)
            write_pgm(staging / f"design_x{s}_islands.pgm", islands.mask, comment)
            write_pgm(staging / f"design_x{s}_cleaned.pgm", cleaned.mask, comment)

    def run(self, config: RunConfig, checkpoint_path: Optional[Union[str, Path]] = None) -> RunSummary:
        started = time.perf_counter()
        preset = resolve_preset(config)
        train = resolve_train(config, preset)
        digest = config_hash(config)
        run_name = config.run_name or f"{preset.name}-{digest[:8]}"
        root = Path(config.output_dir) if config.output_dir else self.output_root
        final_dir = root / run_name
        staging = root / f".{run_name}.staging"
        if staging.exists():
            shutil.rmtree(staging)
        staging.mkdir(parents=True)

        log: List[LossReport] = []
        try:
            (staging / CONFIG_FILE).write_text(canonical_json(config.model_dump(mode="json")))
            setup = setup_problem(preset)

            if checkpoint_path is not None:
                checkpoint = load_checkpoint(checkpoint_path)
                if checkpoint.config_hash != digest:
                    logger.warning(f"Checkpoint was written by config {checkpoint.config_hash[:8]}, rendering under {digest[:8]}")
                if tuple(checkpoint.macro_dims) != setup.macro_dims or tuple(checkpoint.micro_dims) != setup.micro_dims:
                    raise ConfigError("checkpoint dimensions do not match the preset", field_path="checkpoint")
                shutil.copyfile(checkpoint_path, staging / CHECKPOINT_FILE)
            else:
                net = network_from_config(train)
                result = TrainingService(verbose=self.verbose).train(net, setup, train)
                log = result.log
                checkpoint = Checkpoint(
                    net=result.net, adam_state=result.adam_state, epoch=result.epochs_completed,
                    config_hash=digest, macro_dims=setup.macro_dims, micro_dims=setup.micro_dims,
                    upsample=train.upsample,
                )
                save_checkpoint(checkpoint, staging / CHECKPOINT_FILE)
                write_epoch_log(log, staging / EPOCH_LOG_FILE)

            upsamples = list(config.render.upsample)
            if config.verify.enabled and config.verify.upsample not in upsamples:
                upsamples.append(config.verify.upsample)
            self._render_artifacts(staging, checkpoint, setup, config, upsamples)

            summary = compute_metrics(staging)
            summary.run_name = run_name
            summary.wall_time_s = time.perf_counter() - started
            summary.artifacts["summary"] = SUMMARY_FILE
            (staging / SUMMARY_FILE).write_text(json.dumps(summary.model_dump(mode="json"), indent=2, sort_keys=True))

            if final_dir.exists():
                shutil.rmtree(final_dir)
            staging.rename(final_dir)
        except Exception:
            shutil.rmtree(staging, ignore_errors=True)
            raise

        logger.info(f"Run {run_name} written to {final_dir}")
        if self.registry is not None:
            try:
                self.registry.record_run(summary, log, str(final_dir))
            except Exception as e:
                # artifacts on disk stay authoritative
                logger.error(f"Failed to record run {run_name} in the registry: {e}")
        return summary
