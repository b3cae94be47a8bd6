# services/objectives_service.py
"""
Loss terms of the two-scale design problem and their gradients with respect to
the micro densities of every cell. Gradients are returned as arrays shaped like
the cell rasters, (n_cells, my, mx).
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from schemas import LossReport, LossWeights
from services.fea_service import (
    STIFFNESS_BASIS,
    FeProblem,
    Material,
    compliance,
    constitutive_matrix,
    solve_structure,
)
from services.homogenization_service import (
    HomogenizationResult,
    HomogenizationService,
    UnitCell,
)

logger = logging.getLogger(__name__)


@dataclass
class CellGrid:
    """Densities, homogenized tensors and tensor sensitivities of every macro cell"""
    macro_dims: tuple
    micro_dims: tuple
    rho: np.ndarray                 # (n_cells, my, mx)
    tensors: np.ndarray             # (n_cells, 3, 3)
    dtensors: np.ndarray            # (n_cells, my*mx, 3, 3)
    material: Material
    active: np.ndarray              # (n_cells,) False for passive cells
    results: List[HomogenizationResult] = field(default_factory=list)

    @property
    def n_cells(self) -> int:
        return self.rho.shape[0]

    @property
    def cell_volumes(self) -> np.ndarray:
        return self.rho.reshape(self.n_cells, -1).mean(axis=1)

    def zeros(self) -> np.ndarray:
        return np.zeros_like(self.rho)

    def chain(self, d_tensor: np.ndarray) -> np.ndarray:
        """Map dL/dE^H per cell (n_cells, 3, 3) to dL/drho per micro element"""
        grad = np.einsum("cab,cmab->cm", d_tensor, self.dtensors).reshape(self.rho.shape)
        grad[~self.active] = 0.0
        return grad


@dataclass
class LossTerm:
    value: float
    grad: np.ndarray


def evaluate_cells(
    rho: np.ndarray,
    macro_dims: Sequence[int],
    material: Material = Material(),
    penal: float = 3.0,
    c0: float = 1e-9,
    passive_void: Optional[np.ndarray] = None,
    passive_solid: Optional[np.ndarray] = None,
    service: Optional[HomogenizationService] = None,
) -> CellGrid:
    """Clamp passive cells, then homogenize every cell and collect the tensor sensitivities"""
    rho = np.array(rho, dtype=float)
    n_cells, my, mx = rho.shape
    if n_cells != macro_dims[0] * macro_dims[1]:
        raise ValueError(f"expected {macro_dims[0] * macro_dims[1]} cells, got {n_cells}")
    active = np.ones(n_cells, dtype=bool)
    if passive_void is not None:
        passive_void = np.asarray(passive_void, dtype=bool).ravel()
        rho[passive_void] = 0.0
        active &= ~passive_void
    if passive_solid is not None:
        passive_solid = np.asarray(passive_solid, dtype=bool).ravel()
        rho[passive_solid] = 1.0
        active &= ~passive_solid

    service = service or HomogenizationService()
    cells = [UnitCell(rho=r, material=material, penal=penal, c0=c0) for r in rho]
    results = service.homogenize_many(cells)
    dtensors = np.stack(service.sensitivities(cells, results))
    return CellGrid(
        macro_dims=(int(macro_dims[0]), int(macro_dims[1])),
        micro_dims=(mx, my),
        rho=rho,
        tensors=np.stack([r.tensor for r in results]),
        dtensors=dtensors,
        material=material,
        active=active,
        results=results,
    )


def _tensor_gradient(problem: FeProblem, adjoint: np.ndarray, u: np.ndarray) -> np.ndarray:
    """-lambda_e^T (dk_e/dE_ab) u_e for every macro element, shape (n_el, 3, 3)"""
    edof = problem.mesh.edof
    return -np.einsum("ei,abij,ej->eab", adjoint[edof], STIFFNESS_BASIS, u[edof])


def reference_compliance(problem: FeProblem, material: Material = Material(), c0: float = 1e-9) -> float:
    """Compliance of the domain with every cell solid (passive void cells at the ersatz floor)"""
    n_el = problem.nel[0] * problem.nel[1]
    tensors = np.repeat(constitutive_matrix(material)[None], n_el, axis=0)
    if problem.passive_void is not None:
        tensors[problem.passive_void] *= c0
    u = solve_structure(problem, tensors).u
    return compliance(u, problem.loads)


def compliance_loss(cells: CellGrid, problem: FeProblem, c_ref: Optional[float]) -> LossTerm:
    if c_ref is None or not c_ref > 0.0:
        raise ValueError("compliance loss needs a positive baseline compliance c0 (compute it once before training)")
    sol = solve_structure(problem, cells.tensors)
    c = compliance(sol.u, problem.loads)

    if problem.has_prescribed_motion:
        adjoint = np.zeros(problem.n_dofs)
        adjoint[sol.free] = sol.factor.solve(problem.loads[sol.free])
    else:
        adjoint = sol.u
    d_tensor = _tensor_gradient(problem, adjoint, sol.u)
    return LossTerm(value=c / c_ref, grad=cells.chain(d_tensor) / c_ref)


@dataclass
class MatchTerm(LossTerm):
    u: np.ndarray = None
    rmse: float = 0.0


def displacement_match_loss(cells: CellGrid, problem: FeProblem, target: np.ndarray, mask: np.ndarray) -> MatchTerm:
    """||gamma o (u - u_t)||^2 with its adjoint gradient"""
    gamma = np.asarray(mask, dtype=float)
    target = np.asarray(target, dtype=float)
    if gamma.shape != (problem.n_dofs,) or target.shape != (problem.n_dofs,):
        raise ValueError(f"target and mask must have shape ({problem.n_dofs},)")
    if not np.any(gamma):
        raise ValueError("displacement mask selects no DOFs")

    sol = solve_structure(problem, cells.tensors)
    residual = gamma * (sol.u - target)
    value = float(residual @ residual)

    adjoint = np.zeros(problem.n_dofs)
    weighted = gamma * residual
    if np.any(weighted[sol.free]):
        adjoint[sol.free] = sol.factor.solve(weighted[sol.free])
    d_tensor = 2.0 * _tensor_gradient(problem, adjoint, sol.u)

    selected = gamma != 0.0
    err = rmse_of(sol.u, target, selected)
    return MatchTerm(value=value, grad=cells.chain(d_tensor), u=sol.u, rmse=err)


def rmse_of(u: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("RMSE mask is empty")
    diff = np.asarray(u)[mask] - np.asarray(target)[mask]
    return float(np.sqrt(np.mean(diff ** 2)))


@dataclass
class BulkTerm:
    value: float
    reference: float
    normalized: float
    grad: np.ndarray

    @property
    def normalized_grad(self) -> np.ndarray:
        return self.grad / self.reference


def solid_bulk_objective(material: Material) -> float:
    d = constitutive_matrix(material)
    return -float(d[0, 0] + d[0, 1] + d[1, 0] + d[1, 1])


def bulk_objective(result: HomogenizationResult, dtensor: np.ndarray, material: Material = Material()) -> BulkTerm:
    """c_i = -(E11 + E12 + E21 + E22), normalized by the solid-cell value"""
    tensor = result.tensor
    value = -float(tensor[0, 0] + tensor[0, 1] + tensor[1, 0] + tensor[1, 1])
    grad = -(dtensor[:, 0, 0] + dtensor[:, 0, 1] + dtensor[:, 1, 0] + dtensor[:, 1, 1])
    reference = solid_bulk_objective(material)
    return BulkTerm(value=value, reference=reference, normalized=value / reference, grad=grad)


def volume_penalty(rho: np.ndarray, targets: np.ndarray, active: Optional[np.ndarray] = None) -> LossTerm:
    """Mean over cells of (V_i/V*_i - 1)^2, V_i the mean micro density"""
    rho = np.asarray(rho, dtype=float)
    n_cells = rho.shape[0]
    targets = np.broadcast_to(np.asarray(targets, dtype=float), (n_cells,))
    if np.any(targets <= 0.0) or np.any(targets > 1.0):
        raise ValueError("volume targets must lie in (0, 1]")
    active = np.ones(n_cells, dtype=bool) if active is None else np.asarray(active, dtype=bool)
    n_active = int(active.sum())
    grad = np.zeros_like(rho)
    if n_active == 0:
        return LossTerm(value=0.0, grad=grad)

    n_el = rho[0].size
    ratio = rho.reshape(n_cells, -1).mean(axis=1) / targets - 1.0
    value = float(np.sum(ratio[active] ** 2) / n_active)
    per_cell = np.where(active, 2.0 * ratio / (targets * n_el * n_active), 0.0)
    grad[:] = per_cell[:, None, None]
    return LossTerm(value=value, grad=grad)


def boundary_loss(rho: np.ndarray, macro_dims: Sequence[int], active: Optional[np.ndarray] = None) -> LossTerm:
    """Mean squared density mismatch of the abutting element strips across shared cell edges"""
    rho = np.asarray(rho, dtype=float)
    nx, ny = int(macro_dims[0]), int(macro_dims[1])
    cells = rho.reshape(ny, nx, *rho.shape[1:])
    active = np.ones(nx * ny, dtype=bool) if active is None else np.asarray(active, dtype=bool)
    active = active.reshape(ny, nx)
    grad = np.zeros_like(cells)

    # (left/lower strip, right/upper strip) pairs: horizontal neighbours share columns, vertical share rows
    edges = []
    for j in range(ny):
        for i in range(nx - 1):
            if active[j, i] and active[j, i + 1]:
                edges.append(((j, i, slice(None), -1), (j, i + 1, slice(None), 0)))
    for j in range(ny - 1):
        for i in range(nx):
            if active[j, i] and active[j + 1, i]:
                edges.append(((j, i, -1, slice(None)), (j + 1, i, 0, slice(None))))
    if not edges:
        return LossTerm(value=0.0, grad=grad.reshape(rho.shape))

    total = 0.0
    for a, b in edges:
        diff = cells[a] - cells[b]
        total += float(np.mean(diff ** 2))
        step = 2.0 * diff / (diff.size * len(edges))
        grad[a] += step
        grad[b] -= step
    return LossTerm(value=total / len(edges), grad=grad.reshape(rho.shape))


def base_cell_l1(rho: np.ndarray, base_cell: np.ndarray, band: np.ndarray) -> LossTerm:
    """Mean absolute deviation from the base cell over the band cells"""
    rho = np.asarray(rho, dtype=float)
    base_cell = np.asarray(base_cell, dtype=float)
    band = np.asarray(band, dtype=bool).ravel()
    if base_cell.shape != rho.shape[1:]:
        raise ValueError(f"base cell shape {base_cell.shape} does not match micro raster {rho.shape[1:]}")
    if band.shape != (rho.shape[0],):
        raise ValueError(f"band mask must have {rho.shape[0]} entries")
    grad = np.zeros_like(rho)
    if not band.any():
        return LossTerm(value=0.0, grad=grad)
    diff = rho[band] - base_cell[None]
    value = float(np.mean(np.abs(diff)))
    grad[band] = np.sign(diff) / diff.size
    return LossTerm(value=value, grad=grad)


def term_coefficients(weights: LossWeights, mode: str, alpha: float, n_active: int) -> Dict[str, float]:
    """Weight applied to each raw part in the combined loss"""
    if mode not in ("compliance", "displacement", "bulk_only"):
        raise ValueError(f"unknown objective mode {mode!r}")
    bulk = -weights.bulk_multiplier / max(n_active, 1)
    return {
        "structural": 1.0 if mode == "compliance" else (alpha if mode == "displacement" else 0.0),
        "bulk": 0.0 if mode == "compliance" else bulk,
        "volume": alpha,
        "boundary": weights.bc_scale * alpha,
        "base_cell": weights.l1_base_weight,
        "regularization": weights.l2_weight,
    }


@dataclass
class LossParts:
    """Raw (unweighted) loss parts of one epoch"""
    structural: Optional[float] = None
    # sum over active cells of c_i / c_{0,i}
    bulk: Optional[float] = None
    volume: float = 0.0
    boundary: float = 0.0
    base_cell: float = 0.0
    regularization: float = 0.0
    per_cell_volume: Sequence[float] = ()
    rmse: Optional[float] = None
    n_active: int = 1


def combine(parts: LossParts, weights: LossWeights, mode: str, alpha: Optional[float] = None,
            epoch: int = 0) -> LossReport:
    alpha = weights.alpha if alpha is None else alpha
    if mode in ("compliance", "displacement") and parts.structural is None:
        raise ValueError(f"{mode} mode needs a structural part")
    if mode in ("displacement", "bulk_only") and parts.bulk is None:
        raise ValueError(f"{mode} mode needs a bulk part")
    if mode == "bulk_only" and parts.structural is not None:
        raise ValueError("bulk_only mode has no structural coupling")

    coef = term_coefficients(weights, mode, alpha, parts.n_active)
    contributions = {
        "structural": coef["structural"] * (parts.structural or 0.0),
        "bulk": coef["bulk"] * (parts.bulk or 0.0),
        "volume": coef["volume"] * parts.volume,
        "boundary": coef["boundary"] * parts.boundary,
        "base_cell": coef["base_cell"] * parts.base_cell,
        "regularization": coef["regularization"] * parts.regularization,
    }
    total = float(sum(contributions.values()))
    return LossReport(
        epoch=epoch,
        total=total,
        per_cell_volume=[float(v) for v in parts.per_cell_volume],
        rmse=parts.rmse,
        alpha=float(alpha),
        **{k: float(v) for k, v in contributions.items()},
    )
