# services/homogenization_service.py
"""
Energy-based periodic homogenization of unit-cell density rasters.

Opposite cell edges share DOFs (node (i, j) folds onto (i mod mx, j mod my)) and
node 0 is fixed to remove rigid translation. For each unit test strain the
periodic fluctuation chi is solved from equivalent nodal loads; the effective
tensor is the cell average of the mutual energies of the corrected fields
u0 - chi.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from dotenv import load_dotenv

from services.fea_service import (
    FactorizedSystem,
    Material,
    element_stiffness,
    simp_derivative,
    simp_interpolate,
)

load_dotenv()

logger = logging.getLogger(__name__)

# element displacements of the unit test strains 11, 22 and 12 (engineering shear)
# at the local nodes (0,0), (1,0), (1,1), (0,1)
TEST_STRAIN_DISPLACEMENTS = np.array([
    [0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0],
    [0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.5, 0.0],
])


@dataclass
class UnitCell:
    rho: np.ndarray
    material: Material = Material()
    penal: float = 3.0
    c0: float = 1e-9

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float)
        if self.rho.ndim != 2 or min(self.rho.shape) < 2:
            raise ValueError(f"unit cell raster must be 2D with at least 2x2 elements, got {self.rho.shape}")
        if not np.all(np.isfinite(self.rho)) or self.rho.min() < 0.0 or self.rho.max() > 1.0:
            raise ValueError("unit cell densities must lie in [0, 1]")

    @property
    def micro_dims(self) -> Tuple[int, int]:
        return self.rho.shape[1], self.rho.shape[0]

    @property
    def area(self) -> float:
        return float(self.rho.size)


@dataclass
class HomogenizationResult:
    tensor: np.ndarray
    # periodic fluctuation fields, one row per test strain
    test_displacements: np.ndarray
    # per-element mutual energies of the corrected fields under the solid base tensor
    mutual_energy_density: np.ndarray
    scale: np.ndarray


@dataclass(frozen=True)
class PeriodicMesh:
    mx: int
    my: int
    edof: np.ndarray
    i_k: np.ndarray
    j_k: np.ndarray

    @property
    def n_dofs(self) -> int:
        return 2 * self.mx * self.my


@lru_cache(maxsize=16)
def get_periodic_mesh(mx: int, my: int) -> PeriodicMesh:
    jj, ii = np.divmod(np.arange(mx * my), mx)

    def fold(i, j):
        return (j % my) * mx + (i % mx)

    nodes = np.stack([fold(ii, jj), fold(ii + 1, jj), fold(ii + 1, jj + 1), fold(ii, jj + 1)], axis=1)
    edof = np.empty((mx * my, 8), dtype=np.int64)
    edof[:, 0::2] = 2 * nodes
    edof[:, 1::2] = 2 * nodes + 1
    return PeriodicMesh(
        mx=mx, my=my, edof=edof,
        i_k=np.repeat(edof, 8, axis=1).ravel(),
        j_k=np.tile(edof, (1, 8)).ravel(),
    )


def homogenize(cell: UnitCell, cell_id: Optional[int] = None) -> HomogenizationResult:
    mx, my = cell.micro_dims
    mesh = get_periodic_mesh(mx, my)
    ke0 = element_stiffness(cell.material)
    scale = simp_interpolate(cell.rho.ravel(), cell.penal, cell.c0)

    values = (scale[:, None] * ke0.ravel()[None, :]).ravel()
    stiffness = sp.coo_matrix((values, (mesh.i_k, mesh.j_k)), shape=(mesh.n_dofs, mesh.n_dofs)).tocsr()

    # equivalent nodal loads of the three unit strains
    element_loads = np.einsum("e,ij,aj->eai", scale, ke0, TEST_STRAIN_DISPLACEMENTS)
    loads = np.zeros((mesh.n_dofs, 3))
    for a in range(3):
        np.add.at(loads[:, a], mesh.edof, element_loads[:, a, :])

    free = np.arange(2, mesh.n_dofs)
    chi = np.zeros((3, mesh.n_dofs))
    factor = FactorizedSystem(stiffness[free][:, free], cell=cell_id)
    chi[:, free] = factor.solve(loads[free]).T

    corrected = TEST_STRAIN_DISPLACEMENTS[None, :, :] - chi[:, mesh.edof].transpose(1, 0, 2)
    mutual = np.einsum("eai,ij,ebj->eab", corrected, ke0, corrected)
    tensor = np.einsum("e,eab->ab", scale, mutual) / cell.area
    tensor = 0.5 * (tensor + tensor.T)
    return HomogenizationResult(tensor=tensor, test_displacements=chi, mutual_energy_density=mutual, scale=scale)


def sensitivity(cell: UnitCell, result: HomogenizationResult) -> np.ndarray:
    """dE^H/drho_e for every micro element, shape (n_elements, 3, 3), elements row-major"""
    if result.mutual_energy_density.shape != (cell.rho.size, 3, 3):
        raise ValueError(
            f"homogenization result has {result.mutual_energy_density.shape[0]} elements, cell has {cell.rho.size}"
        )
    d_scale = simp_derivative(cell.rho.ravel(), cell.penal, cell.c0)
    return d_scale[:, None, None] * result.mutual_energy_density / cell.area


def bulk_modulus(tensor: np.ndarray) -> float:
    tensor = np.asarray(tensor, dtype=float)
    return float((tensor[0, 0] + tensor[0, 1] + tensor[1, 0] + tensor[1, 1]) / 4.0)


def hs_moduli(material: Material) -> Tuple[float, float]:
    """Plane-stress bulk and shear moduli (K0, G0) of the solid phase"""
    e, nu = material.youngs_modulus, material.poisson_ratio
    return e / (2.0 * (1.0 - nu)), e / (2.0 * (1.0 + nu))


def hs_upper_bound(volume_fraction: float, material: Material = Material()) -> float:
    """Two-phase solid/void Hashin-Shtrikman upper bound on the plane bulk modulus"""
    if not 0.0 < volume_fraction <= 1.0:
        raise ValueError(f"volume_fraction must lie in (0, 1], got {volume_fraction}")
    k0, g0 = hs_moduli(material)
    v = volume_fraction
    return v * k0 * g0 / ((1.0 - v) * k0 + g0)


class HomogenizationService:
    """Homogenizes many cells concurrently on a thread pool"""

    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = max_workers or int(os.getenv("TOPONET_WORKERS", "4"))

    def homogenize_many(self, cells: Sequence[UnitCell],
                        cell_ids: Optional[Sequence[int]] = None) -> List[HomogenizationResult]:
        ids = list(cell_ids) if cell_ids is not None else list(range(len(cells)))
        if len(cells) <= 1 or self.max_workers <= 1:
            return [homogenize(cell, cid) for cell, cid in zip(cells, ids)]
        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            return list(pool.map(homogenize, cells, ids))

    def sensitivities(self, cells: Sequence[UnitCell],
                      results: Sequence[HomogenizationResult]) -> List[np.ndarray]:
        return [sensitivity(cell, result) for cell, result in zip(cells, results)]
