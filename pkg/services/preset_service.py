# services/preset_service.py
"""
Problem presets and their translation into finite-element problems, targets
and per-cell design data.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from schemas import (
    BaseCellSpec,
    BoundaryCondition,
    LossWeights,
    NetworkConfig,
    ProblemPreset,
    TargetSpec,
    TrainConfig,
)
from services.exceptions import ConfigError
from services.fea_service import (
    FeProblem,
    Material,
    constitutive_matrix,
    edge_nodes,
    node_dofs,
    node_id,
    solve_structure,
)
from services.homogenization_service import UnitCell, homogenize

logger = logging.getLogger(__name__)

_COMPONENT = {"x": 0, "y": 1}


def _bump() -> ProblemPreset:
    return ProblemPreset(
        name="bump",
        description="Sides clamped, point load at the bottom center, raised bump targeted on the top edge",
        mode="displacement",
        macro_dims=(12, 4),
        micro_dims=(30, 30),
        boundary_conditions=[
            BoundaryCondition(kind="fixed", edge="left"),
            BoundaryCondition(kind="fixed", edge="right"),
            BoundaryCondition(kind="load", edge="node", node=(6, 0), dofs=["y"], value=1.0),
        ],
        target=TargetSpec(kind="profile", edge="top", component="y", amplitude=2.0, center=0.5, half_width=0.25),
        volume_fraction=0.5,
        train=TrainConfig(epochs=300, learning_rate=0.001, mode="displacement"),
    )


def _stretch() -> ProblemPreset:
    return ProblemPreset(
        name="stretch",
        description="Left edge clamped, unit x-displacement on the right edge, bump targeted on the top edge",
        mode="displacement",
        macro_dims=(12, 4),
        micro_dims=(30, 30),
        boundary_conditions=[
            BoundaryCondition(kind="fixed", edge="left"),
            BoundaryCondition(kind="prescribed", edge="right", dofs=["x"], value=1.0),
        ],
        target=TargetSpec(kind="profile", edge="top", component="y", amplitude=1.0, center=0.5, half_width=0.25),
        volume_fraction=0.5,
        train=TrainConfig(epochs=300, learning_rate=0.001, mode="displacement"),
    )


def _npr_a() -> ProblemPreset:
    return ProblemPreset(
        name="npr_a",
        description="Vertical compression on a roller base; target from a nu = -0.3 homogeneous solve",
        mode="displacement",
        macro_dims=(4, 4),
        micro_dims=(30, 30),
        boundary_conditions=[
            BoundaryCondition(kind="fixed", edge="bottom", dofs=["y"]),
            BoundaryCondition(kind="fixed", edge="node", node=(0, 0), dofs=["x"]),
            BoundaryCondition(kind="prescribed", edge="top", dofs=["y"], value=-0.4),
        ],
        target=TargetSpec(kind="material", mask="free",
                          material={"youngs_modulus": 0.1, "poisson_ratio": -0.3}),
        volume_fraction=0.5,
        train=TrainConfig(epochs=300, learning_rate=0.001, mode="displacement"),
    )


def _npr_b() -> ProblemPreset:
    return ProblemPreset(
        name="npr_b",
        description="Horizontal tension on a roller side; target from a nu = -0.3 homogeneous solve",
        mode="displacement",
        macro_dims=(4, 4),
        micro_dims=(30, 30),
        boundary_conditions=[
            BoundaryCondition(kind="fixed", edge="left", dofs=["x"]),
            BoundaryCondition(kind="fixed", edge="node", node=(0, 0), dofs=["y"]),
            BoundaryCondition(kind="prescribed", edge="right", dofs=["x"], value=0.4),
        ],
        target=TargetSpec(kind="material", mask="free",
                          material={"youngs_modulus": 0.1, "poisson_ratio": -0.3}),
        volume_fraction=0.5,
        train=TrainConfig(epochs=300, learning_rate=0.001, mode="displacement"),
    )


def _cloak() -> ProblemPreset:
    return ProblemPreset(
        name="cloak",
        description="Lattice block with a central hole; outer ring matches the hole-free displacement",
        mode="displacement",
        macro_dims=(10, 10),
        micro_dims=(20, 20),
        boundary_conditions=[
            BoundaryCondition(kind="fixed", edge="bottom", dofs=["y"]),
            BoundaryCondition(kind="fixed", edge="node", node=(0, 0), dofs=["x"]),
            BoundaryCondition(kind="prescribed", edge="top", dofs=["y"], value=-1.0),
        ],
        target=TargetSpec(kind="base_cell", mask="band"),
        volume_fraction=0.6,
        passive_void=[(4, 4), (5, 4), (4, 5), (5, 5)],
        band="outer_ring",
        base_cell=BaseCellSpec(kind="frame_cross", bar_width=0.2),
        train=TrainConfig(
            epochs=300,
            learning_rate=0.001,
            mode="displacement",
            weights=LossWeights(l1_base_weight=1.0),
            network=NetworkConfig(weight_noise=0.05),
        ),
    )


def _tank() -> ProblemPreset:
    return ProblemPreset(
        name="tank",
        description="Tank wall panel: top mounted, outward pressure on the sides, engine thrust at the bottom center",
        mode="compliance",
        macro_dims=(12, 6),
        micro_dims=(20, 20),
        boundary_conditions=[
            BoundaryCondition(kind="fixed", edge="top"),
            BoundaryCondition(kind="load", edge="left", dofs=["x"], value=-0.1),
            BoundaryCondition(kind="load", edge="right", dofs=["x"], value=0.1),
            BoundaryCondition(kind="load", edge="bottom", span=(0.4, 0.6), dofs=["y"], value=0.5),
        ],
        volume_fraction=0.4,
        train=TrainConfig(epochs=300, learning_rate=0.001, upsample=2, mode="compliance"),
    )


def _bulk_bench() -> ProblemPreset:
    return ProblemPreset(
        name="bulk_bench",
        description="Row of cells maximizing bulk modulus under a 0.4 to 0.7 volume ramp",
        mode="bulk_only",
        macro_dims=(8, 1),
        micro_dims=(30, 30),
        boundary_conditions=[],
        volume_fraction=0.5,
        volume_ramp=(0.4, 0.7),
        train=TrainConfig(epochs=1000, learning_rate=0.001, mode="bulk_only"),
    )


_FACTORIES = {
    "bump": _bump,
    "npr_a": _npr_a,
    "npr_b": _npr_b,
    "cloak": _cloak,
    "tank": _tank,
    "bulk_bench": _bulk_bench,
    "stretch": _stretch,
}


def list_presets() -> List[str]:
    return list(_FACTORIES)


def get_preset(name: str) -> ProblemPreset:
    if name not in _FACTORIES:
        raise ConfigError(f"unknown preset {name!r} (choose from {', '.join(_FACTORIES)})", field_path="preset")
    return _FACTORIES[name]()


# ----------------------------------------------------------------------------
# Preset -> FE problem
# ----------------------------------------------------------------------------

def _bc_nodes(nel: Tuple[int, int], bc: BoundaryCondition) -> np.ndarray:
    nx, ny = nel
    if bc.edge == "node":
        i, j = bc.node
        if not (0 <= i <= nx and 0 <= j <= ny):
            raise ConfigError(f"node {bc.node} outside the {nx}x{ny} macro mesh", field_path="boundary_conditions")
        return np.array([node_id(nel, i, j)])
    nodes = edge_nodes(nel, bc.edge)
    length = ny if bc.edge in ("left", "right") else nx
    t = np.arange(nodes.size) / length
    keep = (t >= bc.span[0] - 1e-9) & (t <= bc.span[1] + 1e-9)
    return nodes[keep]


def _cell_mask(preset: ProblemPreset, cells) -> Optional[np.ndarray]:
    if not cells:
        return None
    nx, ny = preset.macro_dims
    mask = np.zeros(nx * ny, dtype=bool)
    for i, j in cells:
        mask[j * nx + i] = True
    return mask


def build_problem(preset: ProblemPreset) -> FeProblem:
    nel = tuple(preset.macro_dims)
    n_dofs = 2 * (nel[0] + 1) * (nel[1] + 1)
    fixed = set()
    loads = np.zeros(n_dofs)
    prescribed: Dict[int, float] = {}
    for bc in preset.boundary_conditions:
        dofs = node_dofs(_bc_nodes(nel, bc), bc.dofs)
        if bc.kind == "fixed":
            fixed.update(dofs.tolist())
        elif bc.kind == "load":
            loads[dofs] += bc.value
        else:
            prescribed.update({int(d): bc.value for d in dofs})
    for dof in fixed:
        prescribed.pop(dof, None)
    presc_dofs = np.array(sorted(prescribed), dtype=np.int64)
    return FeProblem(
        nel=nel,
        fixed_dofs=np.array(sorted(fixed), dtype=np.int64),
        loads=loads,
        prescribed_dofs=presc_dofs,
        prescribed_values=np.array([prescribed[d] for d in presc_dofs.tolist()]),
        passive_void=_cell_mask(preset, preset.passive_void),
        passive_solid=_cell_mask(preset, preset.passive_solid),
    )


def preset_material(preset: ProblemPreset) -> Material:
    return Material(preset.material.youngs_modulus, preset.material.poisson_ratio)


def volume_targets(preset: ProblemPreset) -> np.ndarray:
    nx, ny = preset.macro_dims
    if preset.volume_ramp is None:
        return np.full(nx * ny, preset.volume_fraction)
    v0, v1 = preset.volume_ramp
    columns = v0 + (v1 - v0) * np.arange(nx) / max(nx - 1, 1)
    return np.tile(columns, ny)


def band_mask(preset: ProblemPreset) -> Optional[np.ndarray]:
    if preset.band == "none":
        return None
    nx, ny = preset.macro_dims
    jj, ii = np.divmod(np.arange(nx * ny), nx)
    ring = (ii == 0) | (ii == nx - 1) | (jj == 0) | (jj == ny - 1)
    passive = _cell_mask(preset, preset.passive_void + preset.passive_solid)
    if passive is not None:
        ring &= ~passive
    return ring


def base_cell_raster(spec: BaseCellSpec, micro_dims: Tuple[int, int]) -> np.ndarray:
    """Square frame with a centered cross; periodic tiling doubles the frame into full bars"""
    mx, my = micro_dims
    if spec.kind == "solid":
        return np.ones((my, mx))
    raster = np.zeros((my, mx))
    half_x = max(1, int(round(spec.bar_width * mx / 2)))
    half_y = max(1, int(round(spec.bar_width * my / 2)))
    raster[:, :half_x] = 1.0
    raster[:, mx - half_x:] = 1.0
    raster[:half_y, :] = 1.0
    raster[my - half_y:, :] = 1.0
    raster[:, mx // 2 - half_x: mx // 2 + half_x] = 1.0
    raster[my // 2 - half_y: my // 2 + half_y, :] = 1.0
    return raster


def _solve_uniform(preset: ProblemPreset, tensor: np.ndarray) -> np.ndarray:
    problem = build_problem(preset)
    problem.passive_void = None
    problem.passive_solid = None
    n_el = problem.nel[0] * problem.nel[1]
    return solve_structure(problem, np.repeat(tensor[None], n_el, axis=0)).u


def make_target(preset: ProblemPreset) -> np.ndarray:
    """Target displacement field over the macro DOFs"""
    spec = preset.target
    if spec is None:
        raise ConfigError(f"preset {preset.name!r} has no displacement target", field_path="target")
    nel = tuple(preset.macro_dims)

    if spec.kind == "profile":
        nodes = edge_nodes(nel, spec.edge)
        length = nel[1] if spec.edge in ("left", "right") else nel[0]
        t = np.arange(nodes.size) / length
        offset = (t - spec.center) / spec.half_width
        profile = np.where(np.abs(offset) < 1.0, 0.5 * (1.0 + np.cos(np.pi * offset)), 0.0)
        target = np.zeros(2 * (nel[0] + 1) * (nel[1] + 1))
        target[2 * nodes + _COMPONENT[spec.component]] = spec.amplitude * profile
        return target

    if spec.kind == "material":
        material = Material(spec.material.youngs_modulus, spec.material.poisson_ratio)
        return _solve_uniform(preset, constitutive_matrix(material))

    cell = UnitCell(
        rho=base_cell_raster(preset.base_cell, preset.micro_dims),
        material=preset_material(preset),
        penal=preset.train.penal,
        c0=preset.train.c0,
    )
    return _solve_uniform(preset, homogenize(cell).tensor)


def target_mask(preset: ProblemPreset, problem: Optional[FeProblem] = None) -> np.ndarray:
    """Boolean gamma over the macro DOFs; constrained DOFs are never selected"""
    spec = preset.target
    if spec is None:
        raise ConfigError(f"preset {preset.name!r} has no displacement target", field_path="target")
    problem = problem or build_problem(preset)
    nel = problem.nel
    mask = np.zeros(problem.n_dofs, dtype=bool)
    if spec.mask == "edge":
        nodes = edge_nodes(nel, spec.edge)
        mask[2 * nodes + _COMPONENT[spec.component]] = True
    elif spec.mask == "free":
        mask[:] = True
    else:
        band = band_mask(preset)
        if band is None:
            raise ConfigError("band mask requested but preset has no band", field_path="target.mask")
        edof = problem.mesh.edof
        mask[np.unique(edof[band])] = True
    mask[problem.constrained_dofs] = False
    if not mask.any():
        raise ConfigError("target mask selects no free DOFs", field_path="target.mask")
    return mask


@dataclass
class ProblemSetup:
    preset: ProblemPreset
    problem: FeProblem
    material: Material
    volume_targets: np.ndarray
    target: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    base_cell: Optional[np.ndarray] = None
    band: Optional[np.ndarray] = None

    @property
    def macro_dims(self) -> Tuple[int, int]:
        return tuple(self.preset.macro_dims)

    @property
    def micro_dims(self) -> Tuple[int, int]:
        return tuple(self.preset.micro_dims)

    @property
    def mode(self) -> str:
        return self.preset.mode


def setup_problem(preset: ProblemPreset) -> ProblemSetup:
    problem = build_problem(preset)
    setup = ProblemSetup(
        preset=preset,
        problem=problem,
        material=preset_material(preset),
        volume_targets=volume_targets(preset),
        band=band_mask(preset),
    )
    if preset.base_cell is not None:
        setup.base_cell = base_cell_raster(preset.base_cell, preset.micro_dims)
    if preset.target is not None:
        setup.target = make_target(preset)
        setup.mask = target_mask(preset, problem)
    logger.info(f"Prepared preset {preset.name}: {preset.macro_dims[0]}x{preset.macro_dims[1]} cells, mode {preset.mode}")
    return setup
