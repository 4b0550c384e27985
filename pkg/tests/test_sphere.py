import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import best_partition_inertia, random_unit_points
from skyfuse.sphere import (
    ClusterModel,
    InfeasibleClusteringError,
    assign_label,
    chord_from_angle,
    dumps_model,
    geodesic_distance,
    kmeans_pp_init,
    loads_model,
    nearest_two,
    spherical_kmeans,
    to_unit_vector,
    uniform_sphere,
)


def test_axis_cases():
    assert np.allclose(to_unit_vector(0, 0), [1, 0, 0], atol=1e-15)
    assert np.allclose(to_unit_vector(90, 0), [0, 1, 0], atol=1e-15)
    for ra in (0, 33, 271.5):
        assert np.allclose(to_unit_vector(ra, 90), [0, 0, 1], atol=1e-15)


def test_direct_evaluation_45_45():
    assert np.allclose(to_unit_vector(45, 45), [0.5, 0.5, math.sqrt(0.5)], atol=1e-15)


def test_ra_reduced_mod_360():
    assert np.allclose(to_unit_vector(370, 10), to_unit_vector(10, 10), atol=1e-14)


@pytest.mark.parametrize("ra, dec", [(np.nan, 0), (0, np.inf), (0, 90.5)])
def test_domain_errors(ra, dec):
    with pytest.raises(ValueError):
        to_unit_vector(ra, dec)


def test_geodesic_examples():
    v = to_unit_vector(12.0, -33.0)
    assert geodesic_distance(v, v) == 0.0
    assert geodesic_distance([1, 0, 0], [-1, 0, 0]) == pytest.approx(math.pi, abs=1e-15)
    assert geodesic_distance([1, 0, 0], [0, 1, 0]) == pytest.approx(math.pi / 2, abs=1e-15)


def test_geodesic_accurate_at_tiny_angles():
    a = to_unit_vector(0.0, 0.0)
    b = to_unit_vector(1e-7, 0.0)
    assert geodesic_distance(a, b) == pytest.approx(math.radians(1e-7), rel=1e-6)


@settings(max_examples=200, deadline=None)
@given(
    st.floats(0, 360, allow_nan=False),
    st.floats(-90, 90, allow_nan=False),
    st.floats(0, 360, allow_nan=False),
    st.floats(-90, 90, allow_nan=False),
)
def test_chord_geodesic_consistency(a1, d1, a2, d2):
    a, b = to_unit_vector(a1, d1), to_unit_vector(a2, d2)
    chord2 = float(np.dot(a - b, a - b))
    assert abs(chord2 - (2 - 2 * math.cos(geodesic_distance(a, b)))) <= 1e-9


def test_kmeanspp_forced_selection():
    v = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    got = kmeans_pp_init(v, 2, np.random.default_rng(0))
    assert sorted(map(tuple, got)) == sorted(map(tuple, v))


def test_kmeanspp_rejects_bad_k():
    v = random_unit_points(np.random.default_rng(0), 5)
    with pytest.raises(InfeasibleClusteringError):
        kmeans_pp_init(v, 1, np.random.default_rng(0))
    with pytest.raises(InfeasibleClusteringError):
        kmeans_pp_init(v[:2], 3, np.random.default_rng(0))


def test_kmeanspp_deterministic_and_distinct():
    rng = np.random.default_rng(4)
    v = random_unit_points(rng, 8)
    a = kmeans_pp_init(v, 3, np.random.default_rng(99))
    b = kmeans_pp_init(v, 3, np.random.default_rng(99))
    assert np.array_equal(a, b)
    assert len(np.unique(a, axis=0)) == 3


def test_identical_vectors_infeasible():
    v = np.tile([0.0, 0.0, 1.0], (6, 1))
    with pytest.raises(InfeasibleClusteringError):
        spherical_kmeans(v, 2, np.random.default_rng(0))


def _bundle(center, rng, n=4, spread=0.02):
    pts = center + rng.normal(scale=spread, size=(n, 3))
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def test_antipodal_bundles_match_brute_force():
    rng = np.random.default_rng(1)
    a = _bundle(np.array([0.0, 0.0, 1.0]), rng)
    b = _bundle(np.array([0.0, 0.0, -1.0]), rng)
    pts = np.vstack([a, b])
    model = spherical_kmeans(pts, 2, np.random.default_rng(0))
    assert model.inertia == pytest.approx(best_partition_inertia(pts, 2), abs=1e-9)
    labels = model.labels(pts)
    assert len(set(labels[:4])) == 1 and len(set(labels[4:])) == 1 and labels[0] != labels[4]
    for bundle in (a, b):
        mean = bundle.mean(axis=0)
        expect = mean / np.linalg.norm(mean)
        assert np.min(np.linalg.norm(model.centroids - expect, axis=1)) < 1e-9


def test_inertia_non_increasing_and_unit_centroids():
    v = uniform_sphere(3000, np.random.default_rng(2))
    model = spherical_kmeans(v, 12, np.random.default_rng(3))
    hist = np.array(model.inertia_history)
    assert np.all(np.diff(hist) <= 1e-9 * hist[0])
    assert np.allclose(np.linalg.norm(model.centroids, axis=1), 1.0, atol=1e-12)
    assert model.inertia >= 0


def test_kmeans_bitwise_deterministic():
    v = uniform_sphere(2000, np.random.default_rng(5))
    a = spherical_kmeans(v, 7, np.random.default_rng(6))
    b = spherical_kmeans(v, 7, np.random.default_rng(6))
    assert dumps_model(a) == dumps_model(b)
    assert a.inertia_history == b.inertia_history


def test_empty_cluster_is_reseeded():
    # both seeds inside one tight bundle leave a third cluster empty at first
    rng = np.random.default_rng(0)
    pts = np.vstack([_bundle(np.array([1.0, 0, 0]), rng, 5), _bundle(np.array([0, 1.0, 0]), rng, 5)])
    init = np.vstack([pts[0], pts[1], [0.0, 0.0, -1.0]])
    model = spherical_kmeans(pts, 3, rng, init=init)
    assert len(set(model.labels(pts).tolist())) == 3


def test_converged_flag_reflects_max_iter():
    v = uniform_sphere(2000, np.random.default_rng(7))
    model = spherical_kmeans(v, 10, np.random.default_rng(7), max_iter=1)
    assert model.iterations_run == 1 and not model.converged


def test_assign_label_examples():
    c = np.eye(3)
    model = ClusterModel(np.vstack([c, -c[0]]))
    assert assign_label(model, c[2]) == 2
    mid = (c[0] + c[1]) / math.sqrt(2)
    assert assign_label(model, mid) == 0


def test_wrap_pair_same_label():
    v1, v2 = to_unit_vector(359.9, 0.0), to_unit_vector(0.1, 0.0)
    assert np.linalg.norm(v1 - v2) == pytest.approx(2 * math.sin(math.radians(0.1)), abs=1e-12)
    assert chord_from_angle(math.radians(0.2)) == pytest.approx(0.00349065, abs=1e-8)
    # nearest centroid to (0, 0) is far closer than the runner-up (>= 5 deg margin)
    model = ClusterModel(np.vstack([to_unit_vector(40, 10), to_unit_vector(2, -1), to_unit_vector(180, 0)]))
    assert assign_label(model, v1) == assign_label(model, v2) == 1


def test_nearest_two_examples():
    c = np.eye(3)
    model = ClusterModel(c)
    v = 0.9 * c[0] + 0.1 * c[1]
    assert nearest_two(model, v / np.linalg.norm(v)) == (0, 1)
    first, second = nearest_two(model, c[2])
    assert first == 2 and second == 0  # tie between 0 and 1 -> lower index
    rng = np.random.default_rng(3)
    for v in random_unit_points(rng, 50):
        assert nearest_two(model, v)[0] == assign_label(model, v)


def test_model_file_round_trip(tmp_path):
    model = spherical_kmeans(uniform_sphere(500, np.random.default_rng(1)), 5, np.random.default_rng(1))
    model.save(tmp_path / "m.txt")
    back = ClusterModel.load(tmp_path / "m.txt")
    assert np.array_equal(back.centroids, model.centroids)
    text = (tmp_path / "m.txt").read_text().splitlines()
    assert text[0] == "k=5" and len(text) == 6
    probe = uniform_sphere(5000, np.random.default_rng(2))
    assert np.array_equal(back.labels(probe), model.labels(probe))


def test_loads_model_rejects_garbage():
    with pytest.raises(ValueError):
        loads_model("k=2\n1 0 0\n")
    with pytest.raises(ValueError):
        loads_model("1 0 0\n0 1 0\n")


def test_small_instances_match_partition_oracle():
    rng = np.random.default_rng(2024)
    hits = trials = 0
    for _ in range(20):
        n = int(rng.integers(4, 9))
        k = int(rng.integers(2, 4))
        pts = random_unit_points(rng, n)
        model = spherical_kmeans(pts, k, np.random.default_rng(int(rng.integers(1 << 30))))
        if not model.converged:
            continue
        trials += 1
        hits += abs(model.inertia - best_partition_inertia(pts, k)) <= 1e-6
    assert trials >= 18 and hits / trials >= 0.9
