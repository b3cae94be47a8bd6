# services/fea_service.py
"""
2D plane-stress finite elements on unit-square bilinear quads.

Node (i, j) sits at x = i, y = j with id j*(nelx+1) + i; element (i, j) has id
j*nelx + i and counter-clockwise nodes (i,j), (i+1,j), (i+1,j+1), (i,j+1).
DOF 2n is the x-displacement of node n, 2n+1 the y-displacement.
"""
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.linalg import cg, splu

from services.exceptions import DisconnectedStructureError, SingularSystemError

logger = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-8
PIVOT_RATIO = 1e-15
# backward-error acceptance when the forward residual is limited by rounding
BACKWARD_TOL = 1e-12

IntPair = Tuple[int, int]
DisplacementField = np.ndarray


@dataclass(frozen=True)
class Material:
    youngs_modulus: float = 1.0
    poisson_ratio: float = 0.3

    def __post_init__(self):
        if not self.youngs_modulus > 0.0:
            raise ValueError(f"youngs_modulus must be positive, got {self.youngs_modulus}")
        if not -1.0 < self.poisson_ratio < 0.5:
            raise ValueError(f"poisson_ratio must lie in (-1, 0.5), got {self.poisson_ratio}")


def constitutive_matrix(material: Material) -> np.ndarray:
    """Plane-stress Voigt tensor (11, 22, 12) with engineering shear strain"""
    e, nu = material.youngs_modulus, material.poisson_ratio
    return e / (1.0 - nu ** 2) * np.array([
        [1.0, nu, 0.0],
        [nu, 1.0, 0.0],
        [0.0, 0.0, (1.0 - nu) / 2.0],
    ])


def _stiffness_basis() -> np.ndarray:
    """B_a^T B_b integrated over the unit square, shape (3, 3, 8, 8)"""
    xi_n = np.array([-1.0, 1.0, 1.0, -1.0])
    eta_n = np.array([-1.0, -1.0, 1.0, 1.0])
    gp = 1.0 / np.sqrt(3.0)
    basis = np.zeros((3, 3, 8, 8))
    for xi in (-gp, gp):
        for eta in (-gp, gp):
            # unit square: dx/dxi = 1/2, detJ = 1/4
            dn_dx = 0.5 * xi_n * (1.0 + eta_n * eta)
            dn_dy = 0.5 * eta_n * (1.0 + xi_n * xi)
            b = np.zeros((3, 8))
            b[0, 0::2] = dn_dx
            b[1, 1::2] = dn_dy
            b[2, 0::2] = dn_dy
            b[2, 1::2] = dn_dx
            basis += 0.25 * np.einsum("ai,bj->abij", b, b)
    return basis


STIFFNESS_BASIS = _stiffness_basis()


def element_stiffness_from_tensor(tensor: np.ndarray) -> np.ndarray:
    """k_e for one (3, 3) tensor or a stack (n, 3, 3); linear in the tensor"""
    tensor = np.asarray(tensor, dtype=float)
    if tensor.ndim == 2:
        return np.einsum("ab,abij->ij", tensor, STIFFNESS_BASIS)
    return np.einsum("nab,abij->nij", tensor, STIFFNESS_BASIS)


def element_stiffness(material: Material) -> np.ndarray:
    return element_stiffness_from_tensor(constitutive_matrix(material))


def simp_interpolate(rho: np.ndarray, penal: float = 3.0, c0: float = 1e-9) -> np.ndarray:
    """Per-element stiffness scale c0 + rho^p (1 - c0)"""
    rho = np.asarray(rho, dtype=float)
    if penal < 1.0:
        raise ValueError(f"penal must be >= 1, got {penal}")
    if np.any(rho < 0.0) or np.any(rho > 1.0):
        raise ValueError("densities must lie in [0, 1]")
    return c0 + rho ** penal * (1.0 - c0)


def simp_derivative(rho: np.ndarray, penal: float = 3.0, c0: float = 1e-9) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    return penal * rho ** (penal - 1.0) * (1.0 - c0)


@dataclass(frozen=True)
class QuadMesh:
    nelx: int
    nely: int
    edof: np.ndarray
    i_k: np.ndarray
    j_k: np.ndarray

    @property
    def n_elements(self) -> int:
        return self.nelx * self.nely

    @property
    def n_nodes(self) -> int:
        return (self.nelx + 1) * (self.nely + 1)

    @property
    def n_dofs(self) -> int:
        return 2 * self.n_nodes


@lru_cache(maxsize=32)
def get_mesh(nelx: int, nely: int) -> QuadMesh:
    if nelx < 1 or nely < 1:
        raise ValueError(f"mesh needs at least one element per axis, got ({nelx}, {nely})")
    jj, ii = np.divmod(np.arange(nelx * nely), nelx)
    n0 = jj * (nelx + 1) + ii
    nodes = np.stack([n0, n0 + 1, n0 + nelx + 2, n0 + nelx + 1], axis=1)
    edof = np.empty((nelx * nely, 8), dtype=np.int64)
    edof[:, 0::2] = 2 * nodes
    edof[:, 1::2] = 2 * nodes + 1
    i_k = np.repeat(edof, 8, axis=1).ravel()
    j_k = np.tile(edof, (1, 8)).ravel()
    return QuadMesh(nelx=nelx, nely=nely, edof=edof, i_k=i_k, j_k=j_k)


def node_id(nel: Sequence[int], i: int, j: int) -> int:
    return int(j) * (int(nel[0]) + 1) + int(i)


def edge_nodes(nel: Sequence[int], edge: str) -> np.ndarray:
    """Node ids along one side of the mesh, in increasing coordinate order"""
    nx, ny = int(nel[0]), int(nel[1])
    if edge == "left":
        return np.arange(ny + 1) * (nx + 1)
    if edge == "right":
        return np.arange(ny + 1) * (nx + 1) + nx
    if edge == "bottom":
        return np.arange(nx + 1)
    if edge == "top":
        return ny * (nx + 1) + np.arange(nx + 1)
    raise ValueError(f"unknown edge {edge!r}")


def node_dofs(nodes: Iterable[int], components: Iterable[str] = ("x", "y")) -> np.ndarray:
    nodes = np.asarray(list(nodes), dtype=np.int64)
    offsets = {"x": 0, "y": 1}
    parts = [2 * nodes + offsets[c] for c in components]
    return np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)


@dataclass
class FeProblem:
    nel: IntPair
    fixed_dofs: np.ndarray
    loads: np.ndarray
    prescribed_dofs: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    prescribed_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    passive_void: Optional[np.ndarray] = None
    passive_solid: Optional[np.ndarray] = None

    def __post_init__(self):
        self.nel = (int(self.nel[0]), int(self.nel[1]))
        ndof = self.n_dofs
        self.fixed_dofs = np.unique(np.asarray(self.fixed_dofs, dtype=np.int64))
        self.loads = np.asarray(self.loads, dtype=float)
        self.prescribed_dofs = np.asarray(self.prescribed_dofs, dtype=np.int64)
        self.prescribed_values = np.asarray(self.prescribed_values, dtype=float)
        if self.loads.shape != (ndof,):
            raise ValueError(f"loads must have shape ({ndof},), got {self.loads.shape}")
        for name, dofs in (("fixed_dofs", self.fixed_dofs), ("prescribed_dofs", self.prescribed_dofs)):
            if dofs.size and (dofs.min() < 0 or dofs.max() >= ndof):
                raise ValueError(f"{name} must lie in [0, {ndof})")
        if self.prescribed_dofs.shape != self.prescribed_values.shape:
            raise ValueError("prescribed_dofs and prescribed_values must have equal length")
        if np.intersect1d(self.fixed_dofs, self.prescribed_dofs).size:
            raise ValueError("a DOF cannot be both fixed and prescribed")
        n_el = self.nel[0] * self.nel[1]
        for name in ("passive_void", "passive_solid"):
            mask = getattr(self, name)
            if mask is not None:
                mask = np.asarray(mask, dtype=bool).ravel()
                if mask.shape != (n_el,):
                    raise ValueError(f"{name} must have {n_el} entries")
                setattr(self, name, mask)
        if self.passive_void is not None and self.passive_solid is not None:
            if np.any(self.passive_void & self.passive_solid):
                raise ValueError("passive_void and passive_solid masks must be disjoint")

    @property
    def mesh(self) -> QuadMesh:
        return get_mesh(*self.nel)

    @property
    def n_dofs(self) -> int:
        return 2 * (self.nel[0] + 1) * (self.nel[1] + 1)

    @property
    def constrained_dofs(self) -> np.ndarray:
        return np.union1d(self.fixed_dofs, self.prescribed_dofs)

    @property
    def free_dofs(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n_dofs), self.constrained_dofs)

    @property
    def has_prescribed_motion(self) -> bool:
        return bool(np.any(self.prescribed_values != 0.0))


class FactorizedSystem:
    """Sparse LU of a reduced stiffness matrix with the residual contract on every solve"""

    def __init__(self, matrix: sp.spmatrix, cell: Optional[int] = None):
        self.matrix = sp.csc_matrix(matrix)
        self.cell = cell
        if self.matrix.shape[0] == 0:
            self._lu = None
            return
        try:
            self._lu = splu(self.matrix)
        except RuntimeError as e:
            raise SingularSystemError(f"stiffness factorization failed ({e})", cell=cell)
        pivots = np.abs(self._lu.U.diagonal())
        if not np.all(np.isfinite(pivots)) or pivots.min() <= PIVOT_RATIO * pivots.max():
            raise SingularSystemError("stiffness matrix is singular (unsupported or zero-stiffness structure)", cell=cell)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if self._lu is None:
            return np.zeros_like(rhs)
        x = self._lu.solve(rhs)
        if rhs.ndim == 1:
            return self._enforce_contract(x, rhs)
        return np.column_stack([self._enforce_contract(x[:, k], rhs[:, k]) for k in range(rhs.shape[1])])

    def _enforce_contract(self, x: np.ndarray, b: np.ndarray) -> np.ndarray:
        b_norm = np.linalg.norm(b)
        if b_norm == 0.0:
            return np.zeros_like(x)
        for _ in range(2):
            r = b - self.matrix @ x
            if np.all(np.isfinite(x)) and np.linalg.norm(r) <= RESIDUAL_TOL * b_norm:
                return x
            x = x + self._lu.solve(r)

        logger.warning("LU residual above tolerance, falling back to conjugate gradients")
        x_cg, info = cg(self.matrix, b, x0=x, rtol=RESIDUAL_TOL, maxiter=10 * self.matrix.shape[0])
        r_norm = np.linalg.norm(b - self.matrix @ x_cg)
        if info == 0 and np.all(np.isfinite(x_cg)) and r_norm <= RESIDUAL_TOL * b_norm:
            return x_cg

        scale = sp.linalg.norm(self.matrix, np.inf) * np.linalg.norm(x, np.inf) + np.linalg.norm(b, np.inf)
        r_inf = np.linalg.norm(b - self.matrix @ x, np.inf)
        if np.all(np.isfinite(x)) and r_inf <= BACKWARD_TOL * scale:
            logger.warning(f"accepting solve on backward error {r_inf / scale:.2e} (ill-conditioned system)")
            return x
        raise SingularSystemError(
            f"linear solve missed the residual contract (relative residual {r_norm / b_norm:.2e})",
            cell=self.cell,
        )


def assemble(mesh: QuadMesh, element_matrices: np.ndarray) -> sp.csr_matrix:
    """Global stiffness from per-element 8x8 matrices (n_elements, 8, 8)"""
    element_matrices = np.asarray(element_matrices, dtype=float)
    if element_matrices.shape != (mesh.n_elements, 8, 8):
        raise ValueError(f"expected element matrices of shape ({mesh.n_elements}, 8, 8), got {element_matrices.shape}")
    values = element_matrices.reshape(mesh.n_elements, 64).ravel()
    return sp.coo_matrix((values, (mesh.i_k, mesh.j_k)), shape=(mesh.n_dofs, mesh.n_dofs)).tocsr()


def _as_element_matrices(problem: FeProblem, per_element: np.ndarray) -> np.ndarray:
    per_element = np.asarray(per_element, dtype=float)
    if per_element.ndim == 3 and per_element.shape[1:] == (3, 3):
        return element_stiffness_from_tensor(per_element)
    return per_element


@dataclass
class StructuralSolution:
    u: DisplacementField
    stiffness: sp.csr_matrix
    factor: FactorizedSystem
    free: np.ndarray


def solve_structure(problem: FeProblem, per_element: np.ndarray, cell: Optional[int] = None) -> StructuralSolution:
    """Solve K u = F with fixed DOFs eliminated and prescribed motion moved to the right-hand side"""
    if problem.constrained_dofs.size == 0:
        raise SingularSystemError("structure is unconstrained (no fixed or prescribed DOFs)", cell=cell)
    stiffness = assemble(problem.mesh, _as_element_matrices(problem, per_element))
    free = problem.free_dofs

    u = np.zeros(problem.n_dofs)
    u[problem.prescribed_dofs] = problem.prescribed_values
    rhs = problem.loads[free]
    if problem.prescribed_dofs.size:
        rhs = rhs - stiffness[free][:, problem.prescribed_dofs] @ problem.prescribed_values

    factor = FactorizedSystem(stiffness[free][:, free], cell=cell)
    u[free] = factor.solve(rhs)
    return StructuralSolution(u=u, stiffness=stiffness, factor=factor, free=free)


def assemble_and_solve(problem: FeProblem, per_element: np.ndarray) -> DisplacementField:
    """Displacements for per-element constitutive tensors (n, 3, 3) or element matrices (n, 8, 8)"""
    return solve_structure(problem, per_element).u


def compliance(u: DisplacementField, loads: np.ndarray) -> float:
    return float(np.dot(loads, u))


# ----------------------------------------------------------------------------
# Pixel-resolution problems
# ----------------------------------------------------------------------------

def _node_grid(values: np.ndarray, nel: IntPair) -> np.ndarray:
    return values.reshape(nel[1] + 1, nel[0] + 1)


def _refine_constraint(flags: np.ndarray, values: np.ndarray, factor: IntPair) -> Tuple[np.ndarray, np.ndarray]:
    """Carry node flags/values to the fine grid, filling edges whose two end nodes are both flagged"""
    fx, fy = factor
    ny1, nx1 = flags.shape
    fine_flags = np.zeros(((ny1 - 1) * fy + 1, (nx1 - 1) * fx + 1), dtype=bool)
    fine_values = np.zeros(fine_flags.shape)
    fine_flags[::fy, ::fx] = flags
    fine_values[::fy, ::fx] = values
    t_x = np.arange(1, fx) / fx
    t_y = np.arange(1, fy) / fy
    for j, i in zip(*np.nonzero(flags[:, :-1] & flags[:, 1:])):
        cols = i * fx + np.arange(1, fx)
        fine_flags[j * fy, cols] = True
        fine_values[j * fy, cols] = (1 - t_x) * values[j, i] + t_x * values[j, i + 1]
    for j, i in zip(*np.nonzero(flags[:-1, :] & flags[1:, :])):
        rows = j * fy + np.arange(1, fy)
        fine_flags[rows, i * fx] = True
        fine_values[rows, i * fx] = (1 - t_y) * values[j, i] + t_y * values[j + 1, i]
    return fine_flags, fine_values


def _spread_load(fine: np.ndarray, i: int, j: int, load: float, factor: IntPair, nel: IntPair) -> None:
    """Hat-weighted distribution of a macro nodal load along the boundary edge it sits on"""
    fx, fy = factor
    nx, ny = nel
    fi, fj = i * fx, j * fy
    ny_f, nx_f = fine.shape
    if j in (0, ny) and fx > 1:
        offsets = np.arange(-(fx - 1), fx)
        cols = fi + offsets
        keep = (cols >= 0) & (cols < nx_f)
        weights = (1.0 - np.abs(offsets[keep]) / fx)
        fine[fj, cols[keep]] += load * weights / weights.sum()
    elif i in (0, nx) and fy > 1:
        offsets = np.arange(-(fy - 1), fy)
        rows = fj + offsets
        keep = (rows >= 0) & (rows < ny_f)
        weights = (1.0 - np.abs(offsets[keep]) / fy)
        fine[rows[keep], fi] += load * weights / weights.sum()
    else:
        fine[fj, fi] += load


def refine_problem(problem: FeProblem, factor: Sequence[int]) -> FeProblem:
    """Map a macro problem onto a mesh with factor x factor elements per macro element"""
    fx, fy = int(factor[0]), int(factor[1])
    if fx < 1 or fy < 1:
        raise ValueError(f"refinement factor must be >= 1, got {factor}")
    nx, ny = problem.nel
    fine_nel = (nx * fx, ny * fy)
    n_nodes = (nx + 1) * (ny + 1)

    fixed = np.zeros(2 * n_nodes, dtype=bool)
    fixed[problem.fixed_dofs] = True
    presc = np.zeros(2 * n_nodes, dtype=bool)
    presc[problem.prescribed_dofs] = True
    presc_values = np.zeros(2 * n_nodes)
    presc_values[problem.prescribed_dofs] = problem.prescribed_values

    fine_fixed, fine_presc, fine_presc_values, fine_loads = [], [], [], []
    for comp in range(2):
        flags, _ = _refine_constraint(_node_grid(fixed[comp::2], problem.nel),
                                      np.zeros((ny + 1, nx + 1)), (fx, fy))
        fine_fixed.append(flags.ravel())
        flags, values = _refine_constraint(_node_grid(presc[comp::2], problem.nel),
                                           _node_grid(presc_values[comp::2], problem.nel), (fx, fy))
        fine_presc.append(flags.ravel())
        fine_presc_values.append(values.ravel())
        loads = np.zeros((ny * fy + 1, nx * fx + 1))
        macro_loads = _node_grid(problem.loads[comp::2], problem.nel)
        for j, i in zip(*np.nonzero(macro_loads)):
            _spread_load(loads, i, j, macro_loads[j, i], (fx, fy), problem.nel)
        fine_loads.append(loads.ravel())

    n_fine = (fine_nel[0] + 1) * (fine_nel[1] + 1)
    loads = np.zeros(2 * n_fine)
    fixed_mask = np.zeros(2 * n_fine, dtype=bool)
    presc_mask = np.zeros(2 * n_fine, dtype=bool)
    presc_vals = np.zeros(2 * n_fine)
    for comp in range(2):
        loads[comp::2] = fine_loads[comp]
        fixed_mask[comp::2] = fine_fixed[comp]
        presc_mask[comp::2] = fine_presc[comp]
        presc_vals[comp::2] = fine_presc_values[comp]
    # a fine node shared by a fixed and a prescribed edge keeps the support
    presc_mask &= ~fixed_mask

    def upsample_mask(mask: Optional[np.ndarray]) -> Optional[np.ndarray]:
        if mask is None:
            return None
        return np.kron(mask.reshape(ny, nx), np.ones((fy, fx), dtype=bool)).astype(bool).ravel()

    return FeProblem(
        nel=fine_nel,
        fixed_dofs=np.nonzero(fixed_mask)[0],
        loads=loads,
        prescribed_dofs=np.nonzero(presc_mask)[0],
        prescribed_values=presc_vals[presc_mask],
        passive_void=upsample_mask(problem.passive_void),
        passive_solid=upsample_mask(problem.passive_solid),
    )


def refine_field(u: DisplacementField, mask: np.ndarray, nel: Sequence[int],
                 factor: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Place macro nodal values (and mask) on the coincident nodes of the refined mesh"""
    fx, fy = int(factor[0]), int(factor[1])
    nx, ny = int(nel[0]), int(nel[1])
    fine_u = np.zeros((ny * fy + 1, nx * fx + 1, 2))
    fine_mask = np.zeros((ny * fy + 1, nx * fx + 1, 2), dtype=bool)
    fine_u[::fy, ::fx] = np.asarray(u, dtype=float).reshape(ny + 1, nx + 1, 2)
    fine_mask[::fy, ::fx] = np.asarray(mask, dtype=bool).reshape(ny + 1, nx + 1, 2)
    return fine_u.ravel(), fine_mask.ravel()


def node_pixel_mask(nel: Sequence[int], dofs: np.ndarray) -> np.ndarray:
    """Elements (pixels) touching any node that owns one of the given DOFs, shape (nely, nelx)"""
    nx, ny = int(nel[0]), int(nel[1])
    mask = np.zeros((ny, nx), dtype=bool)
    nodes = np.unique(np.asarray(dofs, dtype=np.int64) // 2)
    nj, ni = np.divmod(nodes, nx + 1)
    for dj in (-1, 0):
        for di in (-1, 0):
            ej, ei = nj + dj, ni + di
            keep = (ej >= 0) & (ej < ny) & (ei >= 0) & (ei < nx)
            mask[ej[keep], ei[keep]] = True
    return mask


def load_path_connected(raster: np.ndarray, problem: FeProblem, cutoff: float = 0.5) -> bool:
    """True when one solid component touches both the supports and the loaded/driven DOFs"""
    solid = np.asarray(raster) >= cutoff
    labels, _ = ndimage.label(solid, structure=np.ones((3, 3), dtype=int))
    supports = node_pixel_mask(problem.nel, problem.fixed_dofs)
    driven_dofs = np.union1d(np.nonzero(problem.loads)[0], problem.prescribed_dofs)
    driven = node_pixel_mask(problem.nel, driven_dofs)
    at_supports = set(np.unique(labels[supports & solid]).tolist())
    at_driven = set(np.unique(labels[driven & solid]).tolist())
    if not at_driven:
        return bool(at_supports)
    return bool(at_supports & at_driven)


@dataclass
class FullScaleReport:
    rmse: float
    mean_signed_error: float
    connected: bool
    u: DisplacementField


def full_scale_verify(
    raster: np.ndarray,
    problem: FeProblem,
    target: DisplacementField,
    mask: np.ndarray,
    material: Material = Material(),
    penal: float = 3.0,
    c0: float = 1e-9,
    require_connected: bool = True,
) -> FullScaleReport:
    """One SIMP element per pixel; RMSE against the target at the masked DOFs of the pixel mesh"""
    raster = np.asarray(raster, dtype=float)
    if raster.shape != (problem.nel[1], problem.nel[0]):
        raise ValueError(f"raster shape {raster.shape} does not match problem elements {problem.nel[::-1]}")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("target mask selects no DOFs")

    connected = load_path_connected(raster, problem)
    if require_connected and not connected:
        raise DisconnectedStructureError("no solid load path between supports and loads in the full-scale design")

    rho = np.clip(raster.ravel(), 0.0, 1.0)
    if problem.passive_void is not None:
        rho = np.where(problem.passive_void, 0.0, rho)
    if problem.passive_solid is not None:
        rho = np.where(problem.passive_solid, 1.0, rho)
    scale = simp_interpolate(rho, penal, c0)
    ke = element_stiffness(material)
    u = solve_structure(problem, scale[:, None, None] * ke).u

    err = u[mask] - np.asarray(target, dtype=float)[mask]
    rmse = float(np.sqrt(np.mean(err ** 2)))
    signed = float(np.mean(np.sign(np.asarray(target)[mask]) * err))
    logger.info(f"Full-scale verify on {problem.nel[0]}x{problem.nel[1]} pixels: RMSE {rmse:.4f}")
    return FullScaleReport(rmse=rmse, mean_signed_error=signed, connected=connected, u=u)
