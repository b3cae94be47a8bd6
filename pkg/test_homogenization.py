#!/usr/bin/env python3
"""
Tests for periodic homogenization, its sensitivities and the Hashin-Shtrikman bound
"""
import sys

import numpy as np

from services.fea_service import Material, constitutive_matrix
from services.homogenization_service import (
    HomogenizationService,
    UnitCell,
    bulk_modulus,
    homogenize,
    hs_moduli,
    hs_upper_bound,
    sensitivity,
)


def _cross(n=10, width=2) -> np.ndarray:
    rho = np.full((n, n), 1e-3)
    lo = n // 2 - width // 2
    rho[lo:lo + width, :] = 1.0
    rho[:, lo:lo + width] = 1.0
    return rho


def test_solid_cell_recovers_base_tensor():
    base = constitutive_matrix(Material())
    result = homogenize(UnitCell(np.ones((30, 30))))
    assert np.abs(result.tensor - base).max() <= 1e-9 * np.abs(base).max()
    assert np.isclose(result.tensor[0, 0], 1.0989, atol=1e-4)
    assert np.isclose(result.tensor[0, 1], 0.32967, atol=1e-5)
    assert np.isclose(result.tensor[2, 2], 0.38462, atol=1e-5)


def test_void_cell_scales_with_c0():
    result = homogenize(UnitCell(np.zeros((6, 6)), c0=1e-9))
    assert np.allclose(result.tensor, 1e-9 * constitutive_matrix(Material()), rtol=1e-6)


def test_cross_cell_is_square_symmetric():
    tensor = homogenize(UnitCell(_cross())).tensor
    assert np.allclose(tensor, tensor.T)
    assert np.isclose(tensor[0, 0], tensor[1, 1], rtol=1e-8)
    assert abs(tensor[0, 2]) < 1e-10 and abs(tensor[1, 2]) < 1e-10
    assert np.all(np.linalg.eigvalsh(tensor) > 0.0)


def test_periodic_shift_invariance():
    rng = np.random.default_rng(0)
    rho = rng.uniform(0.1, 1.0, size=(7, 9))
    base = homogenize(UnitCell(rho)).tensor
    shifted = homogenize(UnitCell(np.roll(rho, (3, 4), axis=(0, 1)))).tensor
    assert np.allclose(base, shifted, rtol=1e-8, atol=1e-12)


def test_sensitivity_matches_finite_differences():
    h = 1e-6
    for seed in range(10):
        rho = np.random.default_rng(seed).uniform(0.2, 0.8, size=(6, 6))
        cell = UnitCell(rho)
        grad = sensitivity(cell, homogenize(cell))
        assert grad.shape == (36, 3, 3)
        fd = np.empty_like(grad)
        for e in range(36):
            up, down = rho.copy(), rho.copy()
            up.flat[e] += h
            down.flat[e] -= h
            fd[e] = (homogenize(UnitCell(up)).tensor - homogenize(UnitCell(down)).tensor) / (2 * h)
        assert np.linalg.norm(grad - fd) <= 1e-4 * np.linalg.norm(fd), seed


def test_hs_reference_values():
    k0, g0 = hs_moduli(Material())
    assert np.isclose(k0, 0.71429, atol=1e-5)
    assert np.isclose(g0, 0.38462, atol=1e-5)
    assert np.isclose(hs_upper_bound(0.5), 0.18519, atol=1e-5)
    assert np.isclose(hs_upper_bound(1.0), k0)
    try:
        hs_upper_bound(0.0)
    except ValueError:
        return
    raise AssertionError("zero volume fraction should be rejected")


def test_bulk_of_solid_is_k0():
    tensor = homogenize(UnitCell(np.ones((4, 4)))).tensor
    assert np.isclose(bulk_modulus(tensor), hs_moduli(Material())[0], atol=1e-8)


def test_cross_cell_respects_hs_bound():
    rho = _cross(12, 4)
    tensor = homogenize(UnitCell(rho, c0=1e-9)).tensor
    assert bulk_modulus(tensor) <= hs_upper_bound(rho.mean()) + 1e-9


def test_service_preserves_order():
    cells = [UnitCell(np.full((4, 4), v)) for v in (0.3, 1.0, 0.6)]
    results = HomogenizationService(max_workers=3).homogenize_many(cells)
    serial = [homogenize(c).tensor for c in cells]
    for got, want in zip(results, serial):
        assert np.array_equal(got.tensor, want)


def test_invalid_cells_rejected():
    for rho in (np.ones((1, 4)), np.full((3, 3), 1.5)):
        try:
            UnitCell(rho)
        except ValueError:
            continue
        raise AssertionError("invalid unit cell accepted")


if __name__ == "__main__":
    print("🧪 Homogenization tests")
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
