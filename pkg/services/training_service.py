# services/training_service.py
import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from schemas import LossReport, LossWeights, TrainConfig
from services.exceptions import ConfigError, NumericalError, SingularSystemError, TrainingError
from services.homogenization_service import HomogenizationService
from services.neural_field import (
    NetworkGradients,
    TopologyNetwork,
    backward,
    build_coordinates,
    canonical_json,
    forward,
    init_network,
    network_from_dict,
    network_to_dict,
)
from services.objectives_service import (
    LossParts,
    base_cell_l1,
    boundary_loss,
    bulk_objective,
    combine,
    compliance_loss,
    displacement_match_loss,
    evaluate_cells,
    reference_compliance,
    term_coefficients,
    volume_penalty,
)
from services.preset_service import ProblemSetup

logger = logging.getLogger(__name__)

EPOCH_LOG_COLUMNS = [
    "epoch", "total", "structural", "volume", "boundary", "regularization", "rmse", "alpha", "bulk", "base_cell",
]
CHECKPOINT_VERSION = 1


def select_subcells(epoch: int, macro_dims: Sequence[int], upsample: int) -> np.ndarray:
    """Subcell (a, b) per cell for this epoch; one row-major cycle of upsample^2 shared by all cells"""
    s = int(upsample)
    if s < 1:
        raise ValueError(f"upsample must be >= 1, got {upsample}")
    idx = int(epoch) % (s * s)
    n_cells = int(macro_dims[0]) * int(macro_dims[1])
    return np.tile(np.array([idx % s, idx // s]), (n_cells, 1))


def alpha_schedule(epoch: int, epochs: int, weights: LossWeights) -> float:
    """Linear ramp from alpha to alpha_max over the ramp fraction of the run, then constant"""
    ramp = max(1, int(round(weights.alpha_ramp_fraction * epochs)))
    if epoch >= ramp:
        return float(weights.alpha_max)
    return float(weights.alpha + (weights.alpha_max - weights.alpha) * epoch / ramp)


@dataclass
class AdamState:
    m_kernels: np.ndarray
    v_kernels: np.ndarray
    m_weights: np.ndarray
    v_weights: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, net: TopologyNetwork) -> "AdamState":
        return cls(
            m_kernels=np.zeros_like(net.kernels),
            v_kernels=np.zeros_like(net.kernels),
            m_weights=np.zeros_like(net.weights),
            v_weights=np.zeros_like(net.weights),
        )

    def to_dict(self) -> Dict:
        return {
            "step": self.step,
            "m_kernels": self.m_kernels.ravel().tolist(),
            "v_kernels": self.v_kernels.ravel().tolist(),
            "m_weights": self.m_weights.tolist(),
            "v_weights": self.v_weights.tolist(),
        }

    @classmethod
    def from_dict(cls, record: Dict, net: TopologyNetwork) -> "AdamState":
        state = cls(
            m_kernels=np.asarray(record["m_kernels"], dtype=float).reshape(net.kernels.shape),
            v_kernels=np.asarray(record["v_kernels"], dtype=float).reshape(net.kernels.shape),
            m_weights=np.asarray(record["m_weights"], dtype=float),
            v_weights=np.asarray(record["v_weights"], dtype=float),
            step=int(record["step"]),
        )
        if state.m_weights.shape != net.weights.shape:
            raise ValueError("Adam buffers do not match the network")
        return state


def adam_step(
    net: TopologyNetwork,
    state: AdamState,
    grads: NetworkGradients,
    learning_rate: float,
) -> Tuple[TopologyNetwork, AdamState]:
    """Bias-corrected Adam update of kernels and weights; returns new network and state"""
    if grads.d_kernels.shape != net.kernels.shape or grads.d_weights.shape != net.weights.shape:
        raise ValueError("gradient shapes do not match the network")
    if state.m_kernels.shape != net.kernels.shape or state.m_weights.shape != net.weights.shape:
        raise ValueError("Adam state shapes do not match the network")

    t = state.step + 1
    b1, b2 = state.beta1, state.beta2

    def update(param, m, v, g):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        return param - learning_rate * m_hat / (np.sqrt(v_hat) + state.eps), m, v

    kernels, m_k, v_k = update(net.kernels, state.m_kernels, state.v_kernels, grads.d_kernels)
    weights, m_w, v_w = update(net.weights, state.m_weights, state.v_weights, grads.d_weights)
    new_state = AdamState(m_kernels=m_k, v_kernels=v_k, m_weights=m_w, v_weights=v_w,
                          step=t, beta1=b1, beta2=b2, eps=state.eps)
    return net.replace(kernels, weights), new_state


@dataclass
class EpochResult:
    report: LossReport
    grads: NetworkGradients
    rho: np.ndarray


@dataclass
class TrainingResult:
    net: TopologyNetwork
    adam_state: AdamState
    log: List[LossReport] = field(default_factory=list)
    epochs_completed: int = 0


def network_from_config(config: TrainConfig) -> TopologyNetwork:
    cfg = config.network
    return init_network(
        local_kernels_per_dim=cfg.local_kernels_per_dim,
        global_kernels_per_dim=cfg.global_kernels_per_dim,
        local_range=cfg.local_range,
        global_range=cfg.global_range,
        weight_init=cfg.weight_init,
        weight_noise=cfg.weight_noise,
        seed=config.seed,
    )


class TrainingService:
    """Runs the per-epoch pipeline: coordinates, densities, homogenization, macro solve, loss, backprop, Adam"""

    def __init__(self, homogenizer: Optional[HomogenizationService] = None, verbose: bool = True):
        self.homogenizer = homogenizer or HomogenizationService()
        self.verbose = verbose

    def _mode(self, setup: ProblemSetup, config: TrainConfig) -> str:
        mode = config.mode or setup.mode
        if mode == "displacement" and (setup.target is None or setup.mask is None):
            raise ConfigError("displacement mode needs a target and mask", field_path="train.mode")
        return mode

    def evaluate(
        self,
        net: TopologyNetwork,
        setup: ProblemSetup,
        config: TrainConfig,
        epoch: int,
        c_ref: Optional[float] = None,
    ) -> EpochResult:
        """Loss report and network gradients of one epoch, without updating the network"""
        mode = self._mode(setup, config)
        weights = config.weights
        problem = setup.problem

        selector = select_subcells(epoch, setup.macro_dims, config.upsample)
        coords = build_coordinates(setup.macro_dims, setup.micro_dims, config.upsample, selector)
        rho = coords.to_cells(forward(net, coords))
        grid = evaluate_cells(
            rho, setup.macro_dims, setup.material, config.penal, config.c0,
            problem.passive_void, problem.passive_solid, self.homogenizer,
        )
        alpha = alpha_schedule(epoch, config.epochs, weights)
        n_active = int(grid.active.sum())
        coef = term_coefficients(weights, mode, alpha, n_active)
        parts = LossParts(per_cell_volume=grid.cell_volumes, n_active=n_active)
        d_rho = grid.zeros()

        if mode == "compliance":
            term = compliance_loss(grid, problem, c_ref)
            parts.structural = term.value
            d_rho += coef["structural"] * term.grad
        elif mode == "displacement":
            match = displacement_match_loss(grid, problem, setup.target, setup.mask)
            parts.structural = match.value
            parts.rmse = match.rmse
            d_rho += coef["structural"] * match.grad

        if mode in ("displacement", "bulk_only"):
            bulk_sum = 0.0
            my, mx = rho.shape[1:]
            for c in np.nonzero(grid.active)[0]:
                bulk = bulk_objective(grid.results[c], grid.dtensors[c], setup.material)
                bulk_sum += bulk.normalized
                d_rho[c] += coef["bulk"] * bulk.normalized_grad.reshape(my, mx)
            parts.bulk = bulk_sum

        vol = volume_penalty(grid.rho, setup.volume_targets, grid.active)
        parts.volume = vol.value
        d_rho += coef["volume"] * vol.grad

        bc = boundary_loss(grid.rho, setup.macro_dims, grid.active)
        parts.boundary = bc.value
        d_rho += coef["boundary"] * bc.grad

        if setup.band is not None and setup.base_cell is not None:
            l1 = base_cell_l1(grid.rho, setup.base_cell, setup.band & grid.active)
            parts.base_cell = l1.value
            d_rho += coef["base_cell"] * l1.grad

        parts.regularization = float(net.weights @ net.weights)
        report = combine(parts, weights, mode, alpha, epoch)

        d_rho[~grid.active] = 0.0
        grads = backward(net, coords, d_rho.ravel())
        grads = NetworkGradients(
            d_kernels=grads.d_kernels,
            d_weights=grads.d_weights + 2.0 * coef["regularization"] * net.weights,
        )
        if not np.isfinite(report.total) or not np.all(np.isfinite(grads.d_weights)):
            raise TrainingError("loss or gradient is not finite", epoch=epoch)
        return EpochResult(report=report, grads=grads, rho=grid.rho)

    def train(
        self,
        net: TopologyNetwork,
        setup: ProblemSetup,
        config: TrainConfig,
        start_epoch: int = 0,
        adam_state: Optional[AdamState] = None,
        stop_epoch: Optional[int] = None,
        on_epoch: Optional[Callable[[int, LossReport], None]] = None,
    ) -> TrainingResult:
        mode = self._mode(setup, config)
        adam_state = adam_state or AdamState.zeros_like(net)
        stop_epoch = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)

        c_ref = None
        if mode == "compliance":
            try:
                c_ref = reference_compliance(setup.problem, setup.material, config.c0)
            except SingularSystemError as e:
                raise TrainingError(f"baseline compliance solve failed ({e})", epoch=start_epoch, cell=e.cell)

        log: List[LossReport] = []
        for epoch in range(start_epoch, stop_epoch):
            try:
                result = self.evaluate(net, setup, config, epoch, c_ref)
            except SingularSystemError as e:
                logger.error(f"FE failure at epoch {epoch}: {e}")
                raise TrainingError(str(e), epoch=epoch, cell=e.cell)
            except TrainingError:
                raise
            except NumericalError as e:
                raise TrainingError(str(e), epoch=epoch)

            net, adam_state = adam_step(net, adam_state, result.grads, config.learning_rate)
            log.append(result.report)
            if on_epoch is not None:
                on_epoch(epoch, result.report)
            if self.verbose:
                print(progress_line(result.report, config.epochs))

        logger.info(f"Training finished after {stop_epoch} epochs ({mode} mode)")
        return TrainingResult(net=net, adam_state=adam_state, log=log, epochs_completed=stop_epoch)


def progress_line(report: LossReport, epochs: int) -> str:
    line = (f"epoch {report.epoch + 1}/{epochs}  total {report.total:.6f}  structural {report.structural:.6f}"
            f"  volume {report.volume:.6f}  boundary {report.boundary:.6f}  alpha {report.alpha:.2f}")
    if report.rmse is not None:
        line += f"  rmse {report.rmse:.4f}"
    return line


# ----------------------------------------------------------------------------
# Checkpoints and epoch logs
# ----------------------------------------------------------------------------

@dataclass
class Checkpoint:
    net: TopologyNetwork
    adam_state: AdamState
    epoch: int
    config_hash: str
    macro_dims: Tuple[int, int]
    micro_dims: Tuple[int, int]
    upsample: int


def checkpoint_to_dict(ckpt: Checkpoint) -> Dict:
    return {
        "version": CHECKPOINT_VERSION,
        "network": network_to_dict(ckpt.net),
        "adam": ckpt.adam_state.to_dict(),
        "epoch": ckpt.epoch,
        "config_hash": ckpt.config_hash,
        "macro_dims": list(ckpt.macro_dims),
        "micro_dims": list(ckpt.micro_dims),
        "upsample": ckpt.upsample,
    }


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(canonical_json(checkpoint_to_dict(ckpt)))
    logger.info(f"Checkpoint written to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        record = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read checkpoint {path} ({e})", field_path="checkpoint")
    if record.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {record.get('version')!r}", field_path="checkpoint")
    net = network_from_dict(record["network"])
    return Checkpoint(
        net=net,
        adam_state=AdamState.from_dict(record["adam"], net),
        epoch=int(record["epoch"]),
        config_hash=str(record["config_hash"]),
        macro_dims=tuple(record["macro_dims"]),
        micro_dims=tuple(record["micro_dims"]),
        upsample=int(record["upsample"]),
    )


def _cell(value) -> str:
    return "" if value is None else repr(float(value))


def write_epoch_log(log: Sequence[LossReport], path: Union[str, Path]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(EPOCH_LOG_COLUMNS)
        for report in log:
            writer.writerow([report.epoch] + [_cell(getattr(report, c)) for c in EPOCH_LOG_COLUMNS[1:]])
    return path


def read_epoch_log(path: Union[str, Path]) -> List[Dict[str, Optional[float]]]:
    with Path(path).open(newline="") as handle:
        rows = []
        for row in csv.DictReader(handle):
            rows.append({k: (int(v) if k == "epoch" else (float(v) if v != "" else None)) for k, v in row.items()})
    return rows
