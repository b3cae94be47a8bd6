# services/postprocess_service.py
"""
Rendering of trained networks to density rasters, threshold cleanup and
connectivity diagnostics. Raster row 0 is the bottom of the domain; PGM files
are written top row first.
"""
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from dotenv import load_dotenv
from scipy import ndimage

from services.exceptions import RenderBudgetError
from services.fea_service import FeProblem, node_pixel_mask, refine_problem
from services.neural_field import TopologyNetwork, build_coordinates, forward

load_dotenv()

logger = logging.getLogger(__name__)

# 8-connectivity for the solid phase
SOLID_STRUCTURE = np.ones((3, 3), dtype=bool)


@dataclass
class RenderedDesign:
    raster: np.ndarray
    macro_dims: Tuple[int, int]
    micro_dims: Tuple[int, int]
    upsample: int = 1
    config_hash: str = ""
    epoch: int = 0

    @property
    def tile_shape(self) -> Tuple[int, int]:
        """Pixels per macro cell as (rows, cols)"""
        return self.micro_dims[1] * self.upsample, self.micro_dims[0] * self.upsample


@dataclass
class BinaryDesign:
    mask: np.ndarray
    threshold: float


@dataclass
class ConnectivityReport:
    component_count: int
    largest_fraction: float
    mean_boundary_jump: float

    def as_dict(self) -> dict:
        return {
            "component_count": float(self.component_count),
            "largest_fraction": self.largest_fraction,
            "mean_boundary_jump": self.mean_boundary_jump,
        }


def _raster_of(design: Union[RenderedDesign, BinaryDesign, np.ndarray]) -> np.ndarray:
    if isinstance(design, RenderedDesign):
        return design.raster
    if isinstance(design, BinaryDesign):
        return design.mask.astype(float)
    return np.asarray(design, dtype=float)


def _label(solid: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    labels, n = ndimage.label(solid, structure=SOLID_STRUCTURE)
    return labels, np.bincount(labels.ravel(), minlength=n + 1)


def _keep_components(solid: np.ndarray, min_area: int, protect: Optional[np.ndarray]) -> np.ndarray:
    labels, areas = _label(solid)
    keep = areas >= min_area
    if protect is not None:
        keep[np.unique(labels[protect & solid])] = True
    keep[0] = False
    return keep[labels]


class PostprocessService:
    def __init__(self, pixel_budget: Optional[int] = None):
        self.pixel_budget = pixel_budget or int(os.getenv("TOPONET_PIXEL_BUDGET", "50000000"))

    def render(
        self,
        net: TopologyNetwork,
        macro_dims: Sequence[int],
        micro_dims: Sequence[int],
        upsample: int = 1,
        config_hash: str = "",
        epoch: int = 0,
    ) -> RenderedDesign:
        """Evaluate every subcell of every cell and tile the results into one raster"""
        s = int(upsample)
        if s < 1:
            raise ValueError(f"upsample must be >= 1, got {upsample}")
        nx, ny = int(macro_dims[0]), int(macro_dims[1])
        mx, my = int(micro_dims[0]), int(micro_dims[1])
        shape = (ny * s * my, nx * s * mx)
        pixels = shape[0] * shape[1]
        if pixels > self.pixel_budget:
            raise RenderBudgetError(
                f"render of {shape[1]}x{shape[0]} = {pixels} pixels exceeds the pixel budget of {self.pixel_budget}"
            )

        raster = np.empty(shape, dtype=float)
        # one subcell position at a time keeps the coordinate batch at training size
        for idx in range(s * s):
            a, b = idx % s, idx // s
            coords = build_coordinates((nx, ny), (mx, my), s, (a, b))
            values = forward(net, coords)
            cy, jj = np.divmod(coords.pixel[:, 0], my)
            cx, ii = np.divmod(coords.pixel[:, 1], mx)
            raster[(cy * s + b) * my + jj, (cx * s + a) * mx + ii] = values
        logger.info(f"Rendered {shape[1]}x{shape[0]} raster at upsample {s}")
        return RenderedDesign(raster=raster, macro_dims=(nx, ny), micro_dims=(mx, my), upsample=s,
                              config_hash=config_hash, epoch=epoch)

    def remove_islands(
        self,
        design: Union[RenderedDesign, BinaryDesign, np.ndarray],
        cutoff: float = 0.3,
        min_area: int = 400,
        protect: Optional[np.ndarray] = None,
    ) -> BinaryDesign:
        """Binarize at cutoff and drop solid components smaller than min_area unless protected"""
        if not 0.0 < cutoff < 1.0:
            raise ValueError(f"cutoff must lie in (0, 1), got {cutoff}")
        raster = _raster_of(design)
        return BinaryDesign(mask=_keep_components(raster >= cutoff, min_area, protect), threshold=cutoff)

    def remove_dangling(
        self,
        design: Union[RenderedDesign, BinaryDesign, np.ndarray],
        low: float = 0.3,
        high: float = 0.5,
        min_area: int = 400,
        dilation: int = 1,
        protect: Optional[np.ndarray] = None,
    ) -> BinaryDesign:
        """Erase material that only hangs on to the structure between the two thresholds.

        Components of the high-threshold mask that are large or protected form the
        load-carrying body. Everything in the island-cleaned low mask lying further
        than `dilation` pixels from that body is a dangling piece; each piece is
        dilated and its footprint erased from the low mask.
        """
        if not 0.0 < low < high < 1.0:
            raise ValueError(f"thresholds must satisfy 0 < low < high < 1, got {low}, {high}")
        raster = _raster_of(design)
        base = _keep_components(raster >= low, min_area, protect)
        body = _keep_components((raster >= high) & base, min_area, protect)

        if dilation > 0:
            reach = ndimage.binary_dilation(body, structure=SOLID_STRUCTURE, iterations=dilation)
        else:
            reach = body
        dangling = base & ~reach
        if not dangling.any():
            return BinaryDesign(mask=base, threshold=low)

        erase = ndimage.binary_dilation(dangling, structure=SOLID_STRUCTURE, iterations=max(dilation, 1))
        erase &= base & ~body
        if protect is not None:
            erase &= ~protect
        cleaned = _keep_components(base & ~erase, min_area, protect)
        logger.info(f"Dangling cleanup erased {int(base.sum() - cleaned.sum())} pixels")
        return BinaryDesign(mask=cleaned, threshold=low)

    def connectivity_metric(
        self,
        design: Union[RenderedDesign, np.ndarray],
        cutoff: float = 0.5,
        tile_shape: Optional[Tuple[int, int]] = None,
    ) -> ConnectivityReport:
        """Solid component count, largest-component fraction and mean density jump across cell boundaries"""
        if not 0.0 < cutoff < 1.0:
            raise ValueError(f"cutoff must lie in (0, 1), got {cutoff}")
        raster = _raster_of(design)
        if tile_shape is None:
            if not isinstance(design, RenderedDesign):
                raise ValueError("tile_shape is required for a bare raster")
            tile_shape = design.tile_shape

        labels, areas = _label(raster >= cutoff)
        solid_area = int(areas[1:].sum())
        count = int(areas.size - 1)
        largest = float(areas[1:].max() / solid_area) if solid_area else 0.0

        th, tw = tile_shape
        jumps: List[np.ndarray] = []
        for c in range(tw, raster.shape[1], tw):
            jumps.append(np.abs(raster[:, c - 1] - raster[:, c]))
        for r in range(th, raster.shape[0], th):
            jumps.append(np.abs(raster[r - 1, :] - raster[r, :]))
        jump = float(np.concatenate(jumps).mean()) if jumps else 0.0
        return ConnectivityReport(component_count=count, largest_fraction=largest, mean_boundary_jump=jump)


def protection_mask(problem: FeProblem, pixels_per_cell: Sequence[int]) -> np.ndarray:
    """Pixels touching a support, load or driven DOF of the macro problem at raster resolution"""
    fine = refine_problem(problem, pixels_per_cell)
    dofs = np.concatenate([fine.fixed_dofs, fine.prescribed_dofs, np.nonzero(fine.loads)[0]])
    return node_pixel_mask(fine.nel, dofs)


# ----------------------------------------------------------------------------
# PGM (P5) export
# ----------------------------------------------------------------------------

def write_pgm(path: Union[str, Path], image: np.ndarray, comment: str = "") -> Path:
    """8-bit binary PGM; densities scaled by 255 and rounded, boolean masks as 0/255"""
    path = Path(path)
    image = np.asarray(image)
    if image.dtype == bool:
        data = np.where(image, 255, 0).astype(np.uint8)
    else:
        data = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    data = np.ascontiguousarray(data[::-1])
    header = "P5\n"
    if comment:
        header += f"# {comment}\n"
    header += f"{data.shape[1]} {data.shape[0]}\n255\n"
    with path.open("wb") as handle:
        handle.write(header.encode("ascii"))
        handle.write(data.tobytes())
    return path


def read_pgm(path: Union[str, Path]) -> Tuple[np.ndarray, List[str]]:
    """Raster in [0, 1] with row 0 at the bottom, plus header comments"""
    blob = Path(path).read_bytes()
    size = len(blob)
    tokens: List[str] = []
    comments: List[str] = []
    pos = 0
    while len(tokens) < 4:
        while pos < size and blob[pos:pos + 1].isspace():
            pos += 1
        if pos >= size:
            raise ValueError(f"{path}: truncated PGM header")
        if blob[pos:pos + 1] == b"#":
            end = blob.find(b"\n", pos)
            if end < 0:
                raise ValueError(f"{path}: truncated PGM header")
            comments.append(blob[pos + 1:end].decode("ascii").strip())
            pos = end + 1
            continue
        end = pos
        while end < size and not blob[end:end + 1].isspace():
            end += 1
        if end >= size:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(blob[pos:end].decode("ascii", errors="replace"))
        pos = end
    if tokens[0] != "P5":
        raise ValueError(f"{path} is not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise ValueError(f"{path}: malformed PGM header {tokens[1:]!r}")
    if width < 1 or height < 1:
        raise ValueError(f"{path}: bad PGM size {width}x{height}")
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM (maxval 255) is supported, got {maxval}")
    pos += 1
    payload = blob[pos:pos + width * height]
    if len(payload) != width * height:
        raise ValueError(f"{path}: expected {width * height} pixel bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return data[::-1].astype(float) / maxval, comments


def provenance_comment(config_hash: str, epoch: int) -> str:
    return f"provenance {config_hash} epoch {epoch}"


def parse_provenance(comments: Sequence[str]) -> Tuple[str, int]:
    for line in comments:
        parts = line.split()
        if len(parts) == 4 and parts[0] == "provenance" and parts[2] == "epoch":
            return parts[1], int(parts[3])
    return "", 0
