import math
import pickle

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from spatvim.core import (Dataset, LinkFunction, Location, Sites, cross_distances,
                          inverse_transform_outcome, pairwise_distances, read_dataset_csv,
                          transform_outcome, write_dataset_csv)
from spatvim.exceptions import ConfigurationError, DomainError, SchemaError


def test_log_of_powers_of_e():
    out = transform_outcome([1, math.e, math.e ** 2], "log")
    np.testing.assert_allclose(out, [0, 1, 2], atol=1e-15)


def test_sqrt_transform():
    np.testing.assert_array_equal(transform_outcome([4, 9], "sqrt"), [2, 3])


def test_log_roundtrip_single_value():
    z = transform_outcome([0.5], "log")
    assert abs(inverse_transform_outcome(z, "log")[0] - 0.5) < 1e-12


def test_log_rejects_nonpositive_and_names_index():
    with pytest.raises(DomainError, match="index 2"):
        transform_outcome([1.0, 2.0, 0.0], "log")


def test_sqrt_rejects_negative():
    with pytest.raises(DomainError, match="index 0"):
        transform_outcome([-1.0], "sqrt")


def test_unknown_transform():
    with pytest.raises(ConfigurationError):
        transform_outcome([1.0], "logit")


@pytest.mark.parametrize("kind,lo", [("identity", -1e6), ("log", 1e-6), ("sqrt", 0.0)])
def test_roundtrip_1000_random_values(kind, lo):
    rng = np.random.default_rng(7)
    y = rng.uniform(lo, 1e3, 1000)
    back = inverse_transform_outcome(transform_outcome(y, kind), kind)
    np.testing.assert_allclose(back, y, rtol=1e-12, atol=1e-12)


def test_link_roundtrip():
    lk = LinkFunction("log")
    mu = np.array([0.1, 1.0, 7.5])
    np.testing.assert_allclose(lk.invert(lk.apply(mu)), mu, rtol=1e-14)
    with pytest.raises(DomainError):
        lk.apply([-1.0])
    with pytest.raises(ConfigurationError):
        LinkFunction("probit")


def test_three_four_five():
    d = pairwise_distances(Sites([[0, 0], [3, 4]]))
    assert d[0, 1] == 5.0 and d[1, 0] == 5.0


def test_single_site_zero_matrix():
    d = pairwise_distances(Sites([[1.5, -2.0]]))
    assert d.shape == (1, 1) and d[0, 0] == 0.0


def test_haversine_quarter_circle():
    s = Sites([[0, 0], [0, 90]], metric="haversine-km")
    d = pairwise_distances(s)[0, 1]
    assert d == pytest.approx(oracles.haversine_km(0, 0, 0, 90), rel=1e-12)
    assert d == pytest.approx(oracles.QUARTER_GREAT_CIRCLE_KM, rel=1e-12)


def test_haversine_random_pairs_match_oracle(rng):
    pts = np.column_stack([rng.uniform(-180, 180, 20), rng.uniform(-90, 90, 20)])
    d = pairwise_distances(Sites(pts, metric="haversine-km"))
    for i in range(0, 20, 3):
        for j in range(1, 20, 4):
            expected = oracles.haversine_km(*pts[i], *pts[j])
            assert d[i, j] == pytest.approx(expected, rel=1e-9, abs=1e-6)


def test_haversine_coordinate_ranges():
    with pytest.raises(ConfigurationError):
        Sites([[200, 0]], metric="haversine-km")


def test_mixed_metrics_rejected():
    locs = [Location(0, 0, 0, "euclidean"), Location(1, 1, 1, "haversine-km")]
    with pytest.raises(ConfigurationError, match="mix"):
        Sites.from_locations(locs)
    with pytest.raises(ConfigurationError):
        cross_distances(Sites([[0, 0]]), Sites([[0, 0]], metric="haversine-km"))


def test_duplicate_ids_rejected():
    with pytest.raises(ConfigurationError):
        Sites([[0, 0], [1, 1]], ids=[3, 3])


def test_subset_with_repeats_gets_fresh_ids():
    s = Sites([[0, 0], [1, 1], [2, 2]], ids=[10, 11, 12])
    sub = s.subset([0, 0, 2])
    assert len(set(sub.ids.tolist())) == 3
    np.testing.assert_array_equal(sub.coords, [[0, 0], [0, 0], [2, 2]])
    assert s.subset([2, 0]).ids.tolist() == [12, 10]


def test_sites_are_immutable_and_picklable():
    s = Sites([[0, 0], [1, 2]])
    with pytest.raises(AttributeError):
        s.metric = "haversine-km"
    with pytest.raises(ValueError):
        s.coords[0, 0] = 9.0
    t = pickle.loads(pickle.dumps(s))
    assert t == s and t.ids.tolist() == s.ids.tolist()


@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=3, max_size=12))
def test_distance_axioms(points):
    d = pairwise_distances(Sites(points))
    assert np.array_equal(d, d.T)
    assert np.all(np.diag(d) == 0)
    assert np.all(d >= 0)
    n = len(points)
    for a in range(n):
        for b in range(n):
            for c in range(n):
                assert d[a, c] <= d[a, b] + d[b, c] + 1e-9 * (1 + d[a, c])


def _dataset(n=6, p=2, **kw):
    rng = np.random.default_rng(0)
    return Dataset(rng.normal(size=(n, p)), rng.uniform(1, 2, n), Sites(rng.uniform(size=(n, 2))), **kw)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_dataset_rejects_nonfinite(bad):
    d = _dataset()
    X = np.array(d.X)
    X[1, 1] = bad
    with pytest.raises(ConfigurationError):
        Dataset(X, d.y, d.sites)
    y = np.array(d.y)
    y[0] = bad
    with pytest.raises(ConfigurationError):
        Dataset(d.X, y, d.sites)


def test_dataset_shape_checks():
    d = _dataset()
    with pytest.raises(ConfigurationError):
        Dataset(d.X[:2], d.y[:2], d.sites.subset([0, 1]))
    with pytest.raises(ConfigurationError):
        Dataset(d.X, d.y[:-1], d.sites)
    with pytest.raises(ConfigurationError):
        Dataset(d.X, d.y, d.sites, names=("a",))


def test_dataset_records_transform():
    d = _dataset(transform="log")
    np.testing.assert_allclose(d.y_transformed, np.log(d.y))
    assert d.transform == "log"
    assert d.names == ("x1", "x2")
    with pytest.raises(DomainError):
        Dataset(d.X, -d.y, d.sites, transform="log")


def test_dataset_subset():
    d = _dataset(n=8, p=3)
    s = d.subset([1, 3, 5])
    np.testing.assert_array_equal(s.X, d.X[[1, 3, 5]])
    assert s.sites.ids.tolist() == [1, 3, 5]
    with pytest.raises(ConfigurationError, match="at least 3"):
        d.subset([1, 3])


def test_dataset_select_columns():
    d = _dataset(n=8, p=3)
    c = d.select_columns([2, 0])
    assert c.names == ("x3", "x1")
    np.testing.assert_array_equal(c.X, d.X[:, [2, 0]])


def test_csv_roundtrip(tmp_path):
    d = _dataset(n=7, p=3, names=("a", "b", "c"))
    path = tmp_path / "d.csv"
    write_dataset_csv(path, d)
    e = read_dataset_csv(path)
    np.testing.assert_array_equal(e.X, d.X)
    np.testing.assert_array_equal(e.y, d.y)
    np.testing.assert_array_equal(e.sites.coords, d.sites.coords)
    assert e.names == d.names
    assert path.read_text().splitlines()[0] == "site_id,x,y,outcome,a,b,c"


def test_csv_missing_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("site_id,x,y,z1\n0,0,0,1\n")
    with pytest.raises(SchemaError, match="outcome"):
        read_dataset_csv(path)


def test_csv_prediction_input_allows_empty_outcome(tmp_path):
    path = tmp_path / "new.csv"
    path.write_text("site_id,x,y,outcome,z1\n5,0.5,0.25,,3.0\n")
    X, y, sites, names = read_dataset_csv(path, require_outcome=False)
    assert names == ("z1",) and np.isnan(y[0]) and sites.ids.tolist() == [5]
