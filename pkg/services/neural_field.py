# services/neural_field.py
"""
Coordinate-based topology network.

A single layer of trainable sine frequency kernels maps the concatenated
global/local coordinates X = (x, y, u, w) of every micro element to a density:

    rho = sigmoid( sum_k W_k * sin(K_k . X + 1) )

The same network represents every unit cell of the two-scale structure; the
global coordinates (x, y) select the cell and the local coordinates (u, w)
the element inside it.
"""
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from dotenv import load_dotenv
from scipy.special import expit

load_dotenv()

logger = logging.getLogger(__name__)

FORWARD_CHUNK = int(os.getenv("TOPONET_FORWARD_CHUNK", "2048"))

# fixed phase inside the sine, not trainable
PHASE = 1.0
# pre-activations are clipped to this range; no gradient flows past it
Z_CLIP = 36.0

IntPair = Tuple[int, int]


@dataclass(frozen=True)
class CoordinateBatch:
    """Element-center coordinates of a set of (sub)cells, one row per micro element"""
    rows: np.ndarray            # (N, 4) columns x, y, u, w
    cell_index: np.ndarray      # (N,) macro cell id, row-major over the macro grid
    pixel: np.ndarray           # (N, 2) raster (row, col) of each element
    macro_dims: IntPair
    micro_dims: IntPair
    upsample: int
    raster_shape: IntPair
    rendering: bool             # True when every subcell is emitted

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    @property
    def n_cells(self) -> int:
        return self.macro_dims[0] * self.macro_dims[1]

    def to_raster(self, values: np.ndarray) -> np.ndarray:
        """Scatter per-row values into the 2D raster (row 0 is the bottom of the domain)"""
        values = np.asarray(values, dtype=float)
        if values.shape != (self.n_rows,):
            raise ValueError(f"values must have shape ({self.n_rows},), got {values.shape}")
        raster = np.empty(self.raster_shape, dtype=float)
        raster[self.pixel[:, 0], self.pixel[:, 1]] = values
        return raster

    def to_cells(self, values: np.ndarray) -> np.ndarray:
        """Reshape per-row values into (n_cells, my, mx) micro rasters (one subcell per cell only)"""
        if self.rendering:
            raise ValueError("to_cells is undefined for a rendering batch with several subcells per cell")
        mx, my = self.micro_dims
        return np.asarray(values, dtype=float).reshape(self.n_cells, my, mx)


@dataclass(frozen=True)
class TopologyNetwork:
    kernels: np.ndarray         # (n_k, 4) frequencies per normalized coordinate
    weights: np.ndarray         # (n_k,)
    init_config: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kernels.ndim != 2 or self.kernels.shape[1] != 4:
            raise ValueError(f"kernels must have shape (n_k, 4), got {self.kernels.shape}")
        if self.weights.shape != (self.kernels.shape[0],):
            raise ValueError(f"weights must have shape ({self.kernels.shape[0]},), got {self.weights.shape}")

    @property
    def n_kernels(self) -> int:
        return self.kernels.shape[0]

    def replace(self, kernels: np.ndarray, weights: np.ndarray) -> "TopologyNetwork":
        return TopologyNetwork(kernels=kernels, weights=weights, init_config=dict(self.init_config))


@dataclass(frozen=True)
class NetworkGradients:
    d_kernels: np.ndarray
    d_weights: np.ndarray

    def __add__(self, other: "NetworkGradients") -> "NetworkGradients":
        return NetworkGradients(self.d_kernels + other.d_kernels, self.d_weights + other.d_weights)


def _check_dims(name: str, dims: Sequence[int]) -> IntPair:
    if len(dims) != 2:
        raise ValueError(f"{name} must be an integer pair, got {dims!r}")
    a, b = int(dims[0]), int(dims[1])
    if a < 1 or b < 1 or a != dims[0] or b != dims[1]:
        raise ValueError(f"{name} must be positive integers, got {dims!r}")
    return a, b


def build_coordinates(
    macro_dims: Sequence[int],
    micro_dims: Sequence[int],
    upsample: int = 1,
    subcell_selector: Optional[Union[Sequence[int], np.ndarray]] = None,
) -> CoordinateBatch:
    """Element-center coordinates for the whole two-scale domain.

    With a selector (an (a, b) pair shared by all cells or one pair per cell) every
    macro cell contributes the micro grid of exactly one of its upsample x upsample
    subcells. Without a selector and upsample > 1 every subcell is emitted, which is
    the rendering mode.
    """
    nx, ny = _check_dims("macro_dims", macro_dims)
    mx, my = _check_dims("micro_dims", micro_dims)
    s = int(upsample)
    if s < 1:
        raise ValueError(f"upsample must be >= 1, got {upsample}")

    n_cells = nx * ny
    longest = float(max(nx, ny))
    rendering = subcell_selector is None and s > 1

    # micro element centers, u fastest
    jj, ii = np.meshgrid(np.arange(my), np.arange(mx), indexing="ij")
    jj, ii = jj.ravel(), ii.ravel()
    u_local = (ii + 0.5) / mx - 0.5
    w_local = (jj + 0.5) / my - 0.5
    n_el = mx * my

    cy, cx = np.divmod(np.arange(n_cells), nx)
    if rendering:
        sub_b, sub_a = np.divmod(np.arange(s * s), s)
        cell = np.repeat(np.arange(n_cells), s * s)
        a = np.tile(sub_a, n_cells)
        b = np.tile(sub_b, n_cells)
        raster_shape = (ny * s * my, nx * s * mx)
        tile_row = cy[cell] * s + b
        tile_col = cx[cell] * s + a
    else:
        if subcell_selector is None:
            sel = np.zeros((n_cells, 2), dtype=int)
        else:
            sel = np.asarray(subcell_selector, dtype=int)
            if sel.shape == (2,):
                sel = np.tile(sel, (n_cells, 1))
            if sel.shape != (n_cells, 2):
                raise ValueError(f"subcell_selector must be a pair or have shape ({n_cells}, 2), got {sel.shape}")
            if np.any(sel < 0) or np.any(sel >= s):
                raise ValueError(f"subcell_selector entries must lie in [0, {s}), got {sel.min()}..{sel.max()}")
        cell = np.arange(n_cells)
        a, b = sel[:, 0], sel[:, 1]
        raster_shape = (ny * my, nx * mx)
        tile_row = cy
        tile_col = cx

    gx = (cx[cell] + (a + 0.5) / s - nx / 2.0) / longest
    gy = (cy[cell] + (b + 0.5) / s - ny / 2.0) / longest

    n_tiles = cell.shape[0]
    rows = np.empty((n_tiles * n_el, 4), dtype=float)
    rows[:, 0] = np.repeat(gx, n_el)
    rows[:, 1] = np.repeat(gy, n_el)
    rows[:, 2] = np.tile(u_local, n_tiles)
    rows[:, 3] = np.tile(w_local, n_tiles)

    pixel = np.empty((n_tiles * n_el, 2), dtype=np.int64)
    pixel[:, 0] = np.repeat(tile_row * my, n_el) + np.tile(jj, n_tiles)
    pixel[:, 1] = np.repeat(tile_col * mx, n_el) + np.tile(ii, n_tiles)

    return CoordinateBatch(
        rows=rows,
        cell_index=np.repeat(cell, n_el),
        pixel=pixel,
        macro_dims=(nx, ny),
        micro_dims=(mx, my),
        upsample=s,
        raster_shape=raster_shape,
        rendering=rendering,
    )


def _rows_of(coords: Union[CoordinateBatch, np.ndarray]) -> np.ndarray:
    rows = coords.rows if isinstance(coords, CoordinateBatch) else np.asarray(coords, dtype=float)
    if rows.ndim != 2 or rows.shape[1] != 4:
        raise ValueError(f"coordinate rows must have shape (N, 4), got {rows.shape}")
    if not np.all(np.isfinite(rows)):
        raise ValueError("coordinates must be finite")
    return rows


def pre_activation(net: TopologyNetwork, coords: Union[CoordinateBatch, np.ndarray]) -> np.ndarray:
    """z_i = sum_k W_k sin(K_k . X_i + 1), evaluated in row chunks"""
    rows = _rows_of(coords)
    z = np.empty(rows.shape[0], dtype=float)
    for start in range(0, rows.shape[0], FORWARD_CHUNK):
        stop = start + FORWARD_CHUNK
        z[start:stop] = np.sin(rows[start:stop] @ net.kernels.T + PHASE) @ net.weights
    return z


def forward(net: TopologyNetwork, coords: Union[CoordinateBatch, np.ndarray]) -> np.ndarray:
    """Density of every coordinate row, strictly inside (0, 1)"""
    z = pre_activation(net, coords)
    return expit(np.clip(z, -Z_CLIP, Z_CLIP))


def backward(
    net: TopologyNetwork,
    coords: Union[CoordinateBatch, np.ndarray],
    upstream: np.ndarray,
) -> NetworkGradients:
    """Chain an upstream density gradient back to the kernels and weights"""
    rows = _rows_of(coords)
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (rows.shape[0],):
        raise ValueError(f"upstream must have shape ({rows.shape[0]},), got {upstream.shape}")

    d_kernels = np.zeros_like(net.kernels)
    d_weights = np.zeros_like(net.weights)
    for start in range(0, rows.shape[0], FORWARD_CHUNK):
        stop = start + FORWARD_CHUNK
        x = rows[start:stop]
        phase = x @ net.kernels.T + PHASE
        sines = np.sin(phase)
        z = sines @ net.weights
        rho = expit(np.clip(z, -Z_CLIP, Z_CLIP))
        g = upstream[start:stop] * rho * (1.0 - rho)
        g[np.abs(z) > Z_CLIP] = 0.0
        if not np.any(g):
            continue
        d_weights += sines.T @ g
        d_kernels += (np.cos(phase).T @ (g[:, None] * x)) * net.weights[:, None]
    return NetworkGradients(d_kernels=d_kernels, d_weights=d_weights)


def init_network(
    local_kernels_per_dim: int = 10,
    global_kernels_per_dim: int = 6,
    local_range: Sequence[float] = (-0.4, 0.4),
    global_range: Sequence[float] = (-0.6, 0.6),
    weight_init: float = 0.1,
    weight_noise: float = 0.0,
    seed: int = 0,
) -> TopologyNetwork:
    """Tensor-product mesh grid of frequencies; local-u fastest, then local-w, global-x, global-y"""
    n_local, n_global = int(local_kernels_per_dim), int(global_kernels_per_dim)
    if n_local < 1 or n_global < 1:
        raise ValueError("kernel counts per dimension must be >= 1")

    local = np.linspace(float(local_range[0]), float(local_range[1]), n_local)
    glob = np.linspace(float(global_range[0]), float(global_range[1]), n_global)
    gy, gx, lw, lu = np.meshgrid(glob, glob, local, local, indexing="ij")
    kernels = np.stack([gx.ravel(), gy.ravel(), lu.ravel(), lw.ravel()], axis=1)

    weights = np.full(kernels.shape[0], float(weight_init))
    if weight_noise > 0.0:
        rng = np.random.default_rng(seed)
        weights = weights + weight_noise * rng.standard_normal(weights.shape[0])

    init_config = {
        "local_kernels_per_dim": n_local,
        "global_kernels_per_dim": n_global,
        "local_range": [float(local_range[0]), float(local_range[1])],
        "global_range": [float(global_range[0]), float(global_range[1])],
        "weight_init": float(weight_init),
        "weight_noise": float(weight_noise),
        "seed": int(seed),
    }
    logger.debug(f"Initialized topology network with {kernels.shape[0]} kernels")
    return TopologyNetwork(kernels=kernels, weights=weights, init_config=init_config)


def network_to_dict(net: TopologyNetwork) -> Dict:
    """Checkpoint record; kernels stored as the 4 x n_k matrix, row-major"""
    return {
        "n_k": net.n_kernels,
        "kernels": net.kernels.T.ravel().tolist(),
        "weights": net.weights.tolist(),
        "init_config": net.init_config,
    }


def network_from_dict(record: Dict) -> TopologyNetwork:
    n_k = int(record["n_k"])
    kernels = np.asarray(record["kernels"], dtype=float)
    weights = np.asarray(record["weights"], dtype=float)
    if kernels.shape != (4 * n_k,) or weights.shape != (n_k,):
        raise ValueError(f"checkpoint arrays do not match n_k={n_k}")
    return TopologyNetwork(
        kernels=np.ascontiguousarray(kernels.reshape(4, n_k).T),
        weights=weights,
        init_config=dict(record.get("init_config", {})),
    )


def canonical_json(record: Dict) -> str:
    """Sorted keys and shortest round-trip floats, so equal states give equal bytes"""
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def save_network(net: TopologyNetwork, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(canonical_json(network_to_dict(net)))
    return path


def load_network(path: Union[str, Path]) -> TopologyNetwork:
    return network_from_dict(json.loads(Path(path).read_text()))
