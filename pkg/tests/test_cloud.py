import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import sphere_points
from reference import brute_fps, brute_knn
from zsad3d.cloud import (CloudError, PatchSet, PointCloud, estimate_normals,
                          farthest_point_sampling, knn_group, knn_indices, normalize_cloud)


# ---------------------------------------------------------------- container

def test_cloud_rejects_bad_inputs():
    with pytest.raises(CloudError):
        PointCloud(np.zeros((3, 2)))
    with pytest.raises(CloudError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))
    with pytest.raises(CloudError):
        PointCloud(np.zeros((2, 3)), normals=np.array([[1.0, 0, 0], [0, 0.5, 0]]))
    with pytest.raises(CloudError):
        PointCloud(np.zeros((2, 3)), labels=[0, 1, 1])
    with pytest.raises(CloudError):
        PointCloud(np.zeros((2, 3)), labels=[0, 2])


def test_subset_carries_attributes():
    c = PointCloud(np.arange(12.0).reshape(4, 3), labels=[0, 1, 0, 1], regions=[0, 1, 0, 2])
    s = c.subset([3, 1])
    assert s.points.tolist() == [[9, 10, 11], [3, 4, 5]]
    assert s.labels.tolist() == [1, 1]
    assert s.regions.tolist() == [2, 1]


def test_patchset_validation():
    PatchSet(np.array([0]), np.array([[0, 1, 2]])).validate(3)
    with pytest.raises(CloudError):
        PatchSet(np.array([0]), np.array([[1, 2, 3]])).validate(4)
    with pytest.raises(CloudError):
        PatchSet(np.array([0]), np.array([[0, 1, 5]])).validate(4)


# ---------------------------------------------------------------- normalize

def test_normalize_identity_on_canonical_cloud():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 0.5, 0], [0, -0.5, 0]])
    out = normalize_cloud(PointCloud(pts))
    np.testing.assert_allclose(out.points, pts, atol=1e-15)


def test_normalize_single_point_goes_to_origin():
    out = normalize_cloud(PointCloud(np.array([[5.0, 5.0, 5.0]])))
    assert out.points.tolist() == [[0.0, 0.0, 0.0]]


def test_normalize_random_cloud():
    rng = np.random.default_rng(0)
    c = PointCloud(rng.normal(3.0, 2.0, size=(50, 3)), labels=rng.integers(0, 2, 50))
    out = normalize_cloud(c)
    assert np.linalg.norm(out.points.mean(axis=0)) < 1e-9
    assert abs(np.linalg.norm(out.points, axis=1).max() - 1.0) < 1e-9
    assert out.labels.tolist() == c.labels.tolist()


def test_normalize_rejects_empty():
    with pytest.raises(CloudError):
        normalize_cloud(PointCloud(np.zeros((0, 3))))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_normalize_property(pts):
    out = normalize_cloud(PointCloud(pts)).points
    scale = max(1.0, np.abs(pts).max())
    assert np.linalg.norm(out.mean(axis=0)) < 1e-9 * scale
    r = np.linalg.norm(out, axis=1).max()
    assert r == 0.0 or abs(r - 1.0) < 1e-9


# ---------------------------------------------------------------- FPS

def test_fps_all_points_is_a_permutation():
    rng = np.random.default_rng(1)
    c = PointCloud(rng.normal(size=(30, 3)))
    idx = farthest_point_sampling(c, 30)
    assert sorted(idx.tolist()) == list(range(30))
    assert idx.tolist() == farthest_point_sampling(c, 30).tolist()


def test_fps_square_picks_diagonal():
    c = PointCloud(np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]]))
    idx = farthest_point_sampling(c, 2).tolist()
    # all corners tie as seed -> lowest index 0; its diagonal is 2
    assert idx == [0, 2]


@pytest.mark.parametrize("seed", range(5))
def test_fps_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(64, 3))
    assert farthest_point_sampling(PointCloud(pts), 8).tolist() == brute_fps(pts, 8)


def test_fps_with_duplicates_returns_distinct_indices():
    pts = np.array([[0.0, 0, 0]] * 3 + [[1.0, 0, 0]])
    idx = farthest_point_sampling(PointCloud(pts), 4)
    assert sorted(idx.tolist()) == [0, 1, 2, 3]


def test_fps_count_out_of_range():
    c = PointCloud(np.zeros((4, 3)))
    for bad in (0, 5):
        with pytest.raises(CloudError):
            farthest_point_sampling(c, bad)


# ---------------------------------------------------------------- kNN

def test_knn_m1_is_self():
    rng = np.random.default_rng(2)
    c = PointCloud(rng.normal(size=(20, 3)))
    p = knn_group(c, np.arange(20), 1)
    assert p.members[:, 0].tolist() == list(range(20))


def test_knn_m_equals_n_sorted_permutation():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(15, 3))
    p = knn_group(PointCloud(pts), [4, 7], 15)
    for row, c in zip(p.members, [4, 7]):
        assert row.tolist() == brute_knn(pts, pts[c], 15)


@pytest.mark.parametrize("seed", range(3))
def test_knn_matches_exhaustive(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(200, 3))
    centers = rng.choice(200, 30, replace=False)
    p = knn_group(PointCloud(pts), centers, 16)
    for row, c in zip(p.members, centers):
        assert row.tolist() == brute_knn(pts, pts[c], 16)
    p.validate(200)


def test_knn_ties_resolved_by_index():
    # integer grid: many exactly equal distances
    g = np.array([[x, y, 0.0] for x in range(5) for y in range(5)])
    p = knn_group(PointCloud(g), [12], 9)
    assert p.members[0].tolist() == brute_knn(g, g[12], 9)


def test_knn_errors():
    c = PointCloud(np.zeros((4, 3)))
    with pytest.raises(CloudError):
        knn_group(c, [0], 5)
    with pytest.raises(CloudError):
        knn_group(c, [], 2)
    with pytest.raises(CloudError):
        knn_indices(c.points, c.points, 0)


# ---------------------------------------------------------------- normals

def test_plane_normals():
    rng = np.random.default_rng(4)
    pts = np.c_[rng.uniform(-1, 1, size=(40, 2)), np.zeros(40)]
    out = estimate_normals(PointCloud(pts), 8)
    # in-plane offsets are tangent to the normal: tie rule -> +z
    np.testing.assert_allclose(np.abs(out.normals[:, 2]), 1.0, atol=1e-12)
    assert np.all(out.normals[:, 2] > 0)


def test_sphere_normals_point_outward():
    rng = np.random.default_rng(5)
    pts = sphere_points(400, rng)
    out = estimate_normals(PointCloud(pts), 8)
    assert np.all((out.normals * pts).sum(axis=1) > 0.9)
    np.testing.assert_allclose(np.linalg.norm(out.normals, axis=1), 1.0, atol=1e-12)


def test_collinear_neighborhood_flagged():
    pts = np.c_[np.linspace(0, 1, 10), np.zeros(10), np.zeros(10)]
    out = estimate_normals(PointCloud(pts), 4)
    assert len(out.meta["degenerate_normals"]) == 10
    assert np.allclose(out.normals[:, 0], 0.0, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(out.normals, axis=1), 1.0)


def test_normals_errors():
    c = PointCloud(np.zeros((5, 3)))
    with pytest.raises(CloudError):
        estimate_normals(c, 2)
    with pytest.raises(CloudError):
        estimate_normals(c, 6)
