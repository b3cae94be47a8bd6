#!/usr/bin/env python3
"""
Tests for rendering, threshold cleanup, connectivity diagnostics and PGM export
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from services.exceptions import RenderBudgetError
from services.fea_service import FeProblem, edge_nodes, node_dofs, node_id
from services.neural_field import build_coordinates, forward, init_network
from services.postprocess_service import (
    BinaryDesign,
    PostprocessService,
    parse_provenance,
    protection_mask,
    provenance_comment,
    read_pgm,
    write_pgm,
)


def _block_with_strut() -> np.ndarray:
    raster = np.zeros((80, 80))
    raster[20:60, 10:41] = 1.0
    # strut between the two thresholds, fading toward its free end
    raster[38:41, 41:71] = np.linspace(0.45, 0.32, 30)[None, :]
    return raster


def test_remove_islands_drops_small_components():
    raster = np.zeros((100, 100))
    raster[10:30, 10:35] = 0.9
    raster[70:72, 70:75] = 0.9
    cleaned = PostprocessService().remove_islands(raster, cutoff=0.3, min_area=400)
    assert cleaned.mask.sum() == 500
    assert not cleaned.mask[70:72, 70:75].any()


def test_remove_islands_keeps_protected_components():
    raster = np.zeros((50, 50))
    raster[5:7, 5:10] = 1.0
    protect = np.zeros_like(raster, dtype=bool)
    protect[5, 5] = True
    cleaned = PostprocessService().remove_islands(raster, min_area=400, protect=protect)
    assert cleaned.mask.sum() == 10


def test_remove_dangling_erases_weak_strut():
    raster = _block_with_strut()
    cleaned = PostprocessService().remove_dangling(raster, low=0.3, high=0.5, min_area=400, dilation=1)
    block = np.zeros_like(raster, dtype=bool)
    block[20:60, 10:41] = True
    assert np.array_equal(cleaned.mask, block)


def test_remove_dangling_is_idempotent():
    post = PostprocessService()
    once = post.remove_dangling(_block_with_strut(), min_area=400)
    twice = post.remove_dangling(once, min_area=400)
    assert np.array_equal(once.mask, twice.mask)
    assert isinstance(twice, BinaryDesign)


def test_remove_dangling_respects_protection():
    raster = _block_with_strut()
    protect = np.zeros_like(raster, dtype=bool)
    protect[38:41, 70] = True
    cleaned = PostprocessService().remove_dangling(raster, min_area=400, protect=protect)
    assert cleaned.mask[protect].all()
    assert not cleaned.mask[38:41, 50].any()


def test_connectivity_of_solid_raster():
    report = PostprocessService().connectivity_metric(np.ones((20, 20)), tile_shape=(10, 10))
    assert report.component_count == 1
    assert report.largest_fraction == 1.0
    assert report.mean_boundary_jump == 0.0


def test_connectivity_of_two_squares():
    raster = np.zeros((20, 20))
    raster[2:6, 2:6] = 1.0
    raster[12:16, 12:16] = 1.0
    report = PostprocessService().connectivity_metric(raster, tile_shape=(10, 10))
    assert report.component_count == 2
    assert report.largest_fraction == 0.5
    assert report.as_dict()["component_count"] == 2.0


def test_render_matches_rendering_batch():
    net = init_network(local_kernels_per_dim=3, global_kernels_per_dim=2, weight_noise=0.5, seed=4)
    design = PostprocessService().render(net, (3, 2), (4, 5), upsample=2, config_hash="h", epoch=9)
    coords = build_coordinates((3, 2), (4, 5), upsample=2)
    assert design.raster.shape == (20, 24)
    assert design.tile_shape == (10, 8)
    assert np.allclose(design.raster, coords.to_raster(forward(net, coords)), atol=1e-12)


def test_render_budget_enforced():
    net = init_network(local_kernels_per_dim=2, global_kernels_per_dim=2)
    try:
        PostprocessService(pixel_budget=100).render(net, (4, 4), (10, 10))
    except RenderBudgetError:
        return
    raise AssertionError("oversized render should be refused")


def test_protection_mask_covers_supports_and_loads():
    nel = (2, 1)
    loads = np.zeros(12)
    loads[2 * node_id(nel, 2, 0) + 1] = -1.0
    problem = FeProblem(nel=nel, fixed_dofs=node_dofs(edge_nodes(nel, "left")), loads=loads)
    mask = protection_mask(problem, (4, 4))
    assert mask.shape == (4, 8)
    assert mask[:, 0].all()
    assert mask[0, 7]
    assert not mask[3, 4]


def test_pgm_roundtrip_and_provenance():
    rng = np.random.default_rng(0)
    raster = rng.uniform(size=(7, 11))
    raster[0, :] = 1.0
    with tempfile.TemporaryDirectory() as tmp:
        path = write_pgm(Path(tmp) / "design.pgm", raster, provenance_comment("deadbeef", 42))
        loaded, comments = read_pgm(path)
        blob = path.read_bytes()
    assert loaded.shape == raster.shape
    assert np.allclose(loaded, np.rint(raster * 255) / 255)
    # bottom raster row is the last image row on disk
    assert blob[-11:] == bytes([255] * 11)
    assert parse_provenance(comments) == ("deadbeef", 42)


def test_pgm_boolean_mask():
    mask = np.zeros((3, 4), dtype=bool)
    mask[1, 2] = True
    with tempfile.TemporaryDirectory() as tmp:
        loaded, comments = read_pgm(write_pgm(Path(tmp) / "mask.pgm", mask))
    assert np.array_equal(loaded == 1.0, mask)
    assert comments == []


def _speckled(seed: int) -> np.ndarray:
    raster = _block_with_strut()
    rng = np.random.default_rng(seed)
    raster += 0.6 * (rng.uniform(size=raster.shape) > 0.97)
    return np.clip(raster, 0.0, 1.0)


def test_remove_islands_is_idempotent():
    post = PostprocessService()
    for seed in range(3):
        once = post.remove_islands(_speckled(seed), cutoff=0.3, min_area=20)
        twice = post.remove_islands(once, cutoff=0.3, min_area=20)
        assert np.array_equal(once.mask, twice.mask), seed


def test_remove_dangling_stays_inside_island_cleanup():
    post = PostprocessService()
    protect = np.zeros((80, 80), dtype=bool)
    protect[38:41, 70] = True
    for seed in range(3):
        raster = _speckled(seed)
        for guard in (None, protect):
            islands = post.remove_islands(raster, cutoff=0.3, min_area=400, protect=guard)
            cleaned = post.remove_dangling(raster, low=0.3, high=0.5, min_area=400, protect=guard)
            assert not (cleaned.mask & ~islands.mask).any(), seed


def test_pgm_reader_rejects_truncated_header():
    with tempfile.TemporaryDirectory() as tmp:
        for name, blob in [("cut.pgm", b"P5\n4 4"), ("blank.pgm", b"P5\n4 4\n   "), ("comment.pgm", b"P5\n# no newline")]:
            path = Path(tmp) / name
            path.write_bytes(blob)
            try:
                read_pgm(path)
            except ValueError:
                continue
            raise AssertionError(f"{name} should be rejected")


def test_pgm_reader_rejects_bad_maxval_and_short_payload():
    with tempfile.TemporaryDirectory() as tmp:
        for name, blob in [("deep.pgm", b"P5\n2 2\n65535\n" + bytes(8)),
                           ("short.pgm", b"P5\n4 4\n255\n" + bytes(10)),
                           ("words.pgm", b"P5\nfour 4\n255\n" + bytes(16))]:
            path = Path(tmp) / name
            path.write_bytes(blob)
            try:
                read_pgm(path)
            except ValueError:
                continue
            raise AssertionError(f"{name} should be rejected")


if __name__ == "__main__":
    print("🧪 Postprocess tests")
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_") and callable(v)]
    failed = 0
    for test in tests:
        try:
            test()
            print(f"   ✅ {test.__name__}")
        except Exception as e:
            failed += 1
            print(f"   ❌ {test.__name__}: {e}")
    sys.exit(1 if failed else 0)
