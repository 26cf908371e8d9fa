import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_rotation, sphere_points
from reference import scalar_fpfh, scalar_pair, scalar_spfh
from zsad3d.cloud import CloudError, PatchSet, PointCloud, estimate_normals
from zsad3d.fpfh import DIM, fpfh, fpfh_with_flags, pair_features, patch_fpfh, spfh


@pytest.fixture(scope="module")
def bumpy_cloud():
    rng = np.random.default_rng(11)
    pts = sphere_points(120, rng) * (1 + 0.1 * rng.random((120, 1)))
    return estimate_normals(PointCloud(pts), 10)


def test_pair_features_match_scalar_port():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p1, p2 = rng.normal(size=3), rng.normal(size=3)
        n1, n2 = rng.normal(size=3), rng.normal(size=3)
        n1 /= np.linalg.norm(n1)
        n2 /= np.linalg.norm(n2)
        a, ph, th, ok = pair_features(p1, n1, p2, n2)
        ref = scalar_pair(p1, n1, p2, n2)
        assert ok
        np.testing.assert_allclose([a, ph, th], ref, atol=1e-12)
        assert -1 <= a <= 1 and -1 <= ph <= 1 and -math.pi <= th <= math.pi


def test_pair_features_degenerate():
    z = np.array([0.0, 0, 1])
    # coincident points
    assert not pair_features(np.zeros(3), z, np.zeros(3), z)[3]
    # line parallel to both normals
    assert not pair_features(np.zeros(3), z, np.array([0.0, 0, 2]), z)[3]


def test_spfh_matches_scalar(bumpy_cloud):
    c = bumpy_cloud
    nbrs = [3, 17, 40, 41, 99]
    np.testing.assert_allclose(spfh(c, 5, nbrs),
                               scalar_spfh(c.points, c.normals, 5, nbrs), atol=1e-12)


def test_fpfh_matches_double_loop_oracle(bumpy_cloud):
    c = bumpy_cloud
    np.testing.assert_allclose(fpfh(c, 8), scalar_fpfh(c.points, c.normals, 8), atol=1e-12)


def test_fpfh_shape_and_block_sums(bumpy_cloud):
    d = fpfh(bumpy_cloud, 8)
    assert d.shape == (120, DIM)
    np.testing.assert_allclose(d.reshape(120, 3, 11).sum(axis=2), 1.0, atol=1e-12)
    assert np.all(d >= 0)


def test_fpfh_rigid_invariance(bumpy_cloud):
    rng = np.random.default_rng(3)
    rot = random_rotation(rng)
    c = bumpy_cloud
    moved = PointCloud(c.points @ rot.T + np.array([0.3, -2.0, 5.0]), normals=c.normals @ rot.T)
    np.testing.assert_allclose(fpfh(moved, 8), fpfh(c, 8), atol=1e-6)


def test_fpfh_duplicates_flagged():
    rng = np.random.default_rng(4)
    pts = sphere_points(30, rng)
    pts[1] = pts[0]
    c = estimate_normals(PointCloud(pts), 6)
    d, clamped = fpfh_with_flags(c, 6)
    assert {0, 1} <= set(clamped.tolist())
    assert np.all(np.isfinite(d))


def test_fpfh_errors():
    with pytest.raises(CloudError):
        fpfh(PointCloud(np.zeros((5, 3))), 2)
    c = estimate_normals(PointCloud(np.random.default_rng(0).normal(size=(5, 3))), 3)
    with pytest.raises(CloudError):
        fpfh(c, 5)
    with pytest.raises(CloudError):
        spfh(c, 0, [0, 1])


def test_patch_fpfh():
    desc = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
    p = PatchSet(np.array([0, 2]), np.array([[0, 1], [2, 3]]))
    out = patch_fpfh(desc, p)
    np.testing.assert_allclose(out[0], [2 ** -0.5, 2 ** -0.5])
    assert out[1].tolist() == [0.0, 0.0]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_fpfh_rigid_invariance_with_recomputed_normals(seed):
    rng = np.random.default_rng(seed)
    pts = sphere_points(80, rng) * (1 + 0.15 * rng.random((80, 1)))
    rot = random_rotation(rng)
    base = estimate_normals(PointCloud(pts), 10)
    moved = estimate_normals(PointCloud(pts @ rot.T + rng.normal(size=3) * 3), 10)
    assert np.abs(fpfh(moved, 8) - fpfh(base, 8)).max() < 1e-6
