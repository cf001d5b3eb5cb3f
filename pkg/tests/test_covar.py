import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ppkit.covar import (CovariateStack, EventFormatError, EventTable, aggregate, coordinate_layers,
                         deduplicate, design_matrix, disaggregate, distance_layer, filter_events,
                         interaction_layer, jitter, load_cities, load_events, pattern_table, raster_layer,
                         read_ascii_grid, restrict_mask, specificity_predicate, standardize, unstandardized,
                         write_ascii_grid, write_events)
from ppkit.geom import GridSpec, PointPattern, Projection, Window


def _stack(values, mask=None, name="v"):
    v = np.asarray(values, dtype=float)
    g = GridSpec(0, 0, 1, 1, v.shape[1], v.shape[0], mask)
    return CovariateStack(g, {name: v})


# ---------------------------------------------------------------- events

def _events_csv(path, rows, header="id,lon,lat,group,specificity"):
    path.write_text(header + "\n" + "\n".join(",".join(map(str, r)) for r in rows) + "\n")
    return path


def test_load_events_three_rows(tmp_path):
    p = _events_csv(tmp_path / "e.csv", [(1, 0.1, 0.2, "BH", 1), (2, 0.5, 0.5, "FE", 2), (3, 0.9, 0.9, "BH", 1)])
    t, dropped = load_events(p, Window.box(0, 0, 1, 1), Projection(planar=True))
    assert len(t) == 3 and dropped == 0
    assert list(t.group) == ["BH", "FE", "BH"]


def test_load_events_bad_specificity_names_line(tmp_path):
    p = _events_csv(tmp_path / "e.csv", [(1, 0.1, 0.2, "BH", 1), (2, 0.5, 0.5, "FE", 6)])
    with pytest.raises(EventFormatError, match=":3:"):
        load_events(p, Window.box(0, 0, 1, 1), Projection(planar=True))


def test_load_events_malformed_and_missing_header(tmp_path):
    p = _events_csv(tmp_path / "e.csv", [(1, "abc", 0.2, "BH", 1)])
    with pytest.raises(EventFormatError, match=":2:"):
        load_events(p, Window.box(0, 0, 1, 1), Projection(planar=True))
    q = _events_csv(tmp_path / "f.csv", [(1, 0.1, 0.2)], header="id,lon,lat")
    with pytest.raises(EventFormatError, match="missing"):
        load_events(q, Window.box(0, 0, 1, 1), Projection(planar=True))


def test_load_events_in_out_matches_window_oracle(tmp_path, lshape):
    rng = np.random.default_rng(4)
    pts = rng.uniform(0, 10, size=(200, 2))
    p = _events_csv(tmp_path / "e.csv", [(i, x, y, "A", 1) for i, (x, y) in enumerate(pts)])
    t, dropped = load_events(p, lshape, Projection(planar=True))
    inside = [(x <= 10 and y <= 5) or (x <= 5) for x, y in pts]
    assert len(t) == sum(inside) and dropped == 200 - sum(inside)


def test_events_csv_roundtrip(tmp_path):
    proj = Projection(8.0, 9.0)
    w = Window.box(-300, -300, 300, 300)
    rng = np.random.default_rng(0)
    pp = PointPattern(rng.uniform(-200, 200, size=(25, 2)), w)
    write_events(tmp_path / "e.csv", pattern_table(pp, proj, "sim"))
    t, dropped = load_events(tmp_path / "e.csv", w, proj)
    assert dropped == 0
    back = t.to_pattern(w, proj)
    assert np.allclose(back.points, pp.points, atol=1e-9)


def _table():
    groups = np.array(["BH", "FE", "BH", "FE", "FE", "BH", "FE", "FE", "BH", "FE"], dtype=object)
    spec = np.array([1, 2, 1, 1, 3, 2, 2, 1, 1, 4])
    n = len(groups)
    return EventTable(np.arange(n).astype(str).astype(object), np.zeros(n), np.zeros(n), groups, spec)


def test_filter_events():
    t = _table()
    assert len(filter_events(t, "BH")) == 4
    all2 = EventTable(t.ids, t.lon, t.lat, t.group, np.full(len(t), 2))
    assert len(filter_events(all2, specificity=specificity_predicate("eq", 1))) == 0
    gt1 = specificity_predicate("gt", 1)
    both = filter_events(t, "FE", gt1)
    composed = filter_events(filter_events(t, "FE"), specificity=gt1)
    assert list(both.ids) == list(composed.ids) == ["1", "4", "6", "9"]
    with pytest.raises(ValueError):
        specificity_predicate("approx", 1)


# ---------------------------------------------------------------- dedup / jitter

def test_deduplicate_examples(unit_square):
    pp = PointPattern(np.array([[0.1, 0.1], [0.3, 0.3], [0.1, 0.1]]), unit_square)
    out, removed = deduplicate(pp)
    assert out.n == 2 and removed == 1 and out.simple
    assert np.array_equal(out.points, [[0.1, 0.1], [0.3, 0.3]])
    uniq = PointPattern(np.array([[0.1, 0.1], [0.3, 0.3]]), unit_square)
    out, removed = deduplicate(uniq)
    assert removed == 0 and np.array_equal(out.points, uniq.points)


def test_deduplicate_714_with_190_shared():
    # 714 events; 190 of them are repeats of 48 shared locations, the rest are unique
    rng = np.random.default_rng(1)
    unique = rng.uniform(0, 100, size=(524 + 0, 2))
    shared_idx = rng.choice(524, size=48, replace=False)
    repeats = np.repeat(unique[shared_idx], 4, axis=0)[:190]
    pts = np.vstack([unique, repeats])
    rng.shuffle(pts)
    out, removed = deduplicate(PointPattern(pts, Window.box(0, 0, 100, 100)))
    assert len(pts) == 714 and out.n == 524 and removed == 190


def test_jitter_examples(unit_square):
    pp = PointPattern(np.array([[0.5, 0.5], [0.5, 0.5]]), unit_square)
    a = jitter(pp, 1e-6, 7)
    b = jitter(pp, 1e-6, 7)
    assert a.simple and a.is_simple()
    assert np.array_equal(a.points, b.points)
    assert np.all(np.abs(a.points - pp.points) < 1e-5)
    with pytest.raises(ValueError):
        jitter(pp, 0.0, 1)


def test_jitter_sd_moment():
    w = Window.box(-1, -1, 1, 1)
    pp = PointPattern(np.zeros((1000, 2)), w)
    out = jitter(pp, 1e-6, 11)
    sd = out.points.std(axis=0, ddof=1)
    assert np.all(np.abs(sd / 1e-6 - 1) < 0.05)


def test_jitter_degrees_before_projection():
    proj = Projection(8.0, 9.0)
    w = Window.box(-100, -100, 100, 100)
    pp = PointPattern(np.zeros((500, 2)), w)
    out = jitter(pp, 1e-3, 2, proj)
    lon, lat = proj.inverse(out.points)
    assert abs(np.std(lat - 9.0) / 1e-3 - 1) < 0.1
    assert abs(np.std(lon - 8.0) / 1e-3 - 1) < 0.1


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_jitter_bound_and_dedup_noop(seed):
    w = Window.box(-1, -1, 1, 1)
    base = np.repeat(np.array([[0.0, 0.0], [0.25, -0.5]]), 20, axis=0)
    out = jitter(PointPattern(base, w), 1e-6, seed)
    assert np.all(np.abs(out.points - base) <= 8e-6)
    assert deduplicate(out)[1] == 0


# ---------------------------------------------------------------- standardize / aggregate

def test_standardize_two_values():
    s = standardize(_stack([[0, 1], [1, 0]]))
    assert np.allclose(s.layers["v"], [[-0.5, 0.5], [0.5, -0.5]])
    assert s.standardization["v"] == (0.5, 0.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_standardize_moments_and_idempotence(seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((8, 9)) < 0.8
    mask[0, :2] = True
    s = standardize(_stack(rng.normal(3, 7, size=(8, 9)), mask))
    x = s.masked("v")
    assert abs(x.mean()) < 1e-9 and abs(x.std() - 0.5) < 1e-9
    s2 = standardize(s)
    assert np.allclose(s2.layers["v"], s.layers["v"], atol=1e-12, rtol=0)


def test_standardize_constant_layer_named():
    with pytest.raises(ValueError, match="'flat'"):
        standardize(_stack(np.ones((3, 3)), name="flat"))


def test_unstandardized_recovers_raw():
    rng = np.random.default_rng(3)
    raw = rng.normal(10, 2, size=(5, 5))
    s = standardize(standardize(_stack(raw)))
    assert np.allclose(unstandardized(s, "v"), raw)


def test_aggregate_examples():
    fine = _stack([[1, 2], [3, 4]])
    coarse = GridSpec(0, 0, 2, 2, 1, 1)
    assert aggregate(fine, coarse).layers["v"][0, 0] == pytest.approx(2.5)
    flat = aggregate(_stack(np.full((4, 4), 7.0)), GridSpec(0, 0, 2, 2, 2, 2))
    assert np.allclose(flat.layers["v"], 7.0)
    with pytest.raises(ValueError):
        aggregate(fine, GridSpec(0, 0, 1.5, 1.5, 2, 2))


def test_aggregate_ragged_mask_oracle():
    rng = np.random.default_rng(5)
    v = rng.normal(size=(6, 6))
    mask = rng.random((6, 6)) < 0.6
    mask[0, 0] = True
    s = aggregate(_stack(v, mask), GridSpec(0, 0, 3, 3, 2, 2))
    for cy in range(2):
        for cx in range(2):
            block_v = v[3 * cy:3 * cy + 3, 3 * cx:3 * cx + 3]
            block_m = mask[3 * cy:3 * cy + 3, 3 * cx:3 * cx + 3]
            if block_m.any():
                assert s.layers["v"][cy, cx] == pytest.approx(block_v[block_m].mean())
                assert s.grid.mask[cy, cx]
            else:
                assert not s.grid.mask[cy, cx]


def test_aggregate_preserves_global_mean_when_tiled():
    rng = np.random.default_rng(6)
    v = rng.normal(size=(8, 8))
    s = aggregate(_stack(v), GridSpec(0, 0, 2, 2, 4, 4))
    assert s.layers["v"].mean() == pytest.approx(v.mean(), abs=1e-9)


def test_aggregate_log_layer_on_raw_scale():
    raw = np.array([[0.0, 9.0], [99.0, 999.0]])
    st_ = standardize(CovariateStack(GridSpec(0, 0, 1, 1, 2, 2), {"pop": np.log1p(raw)}, {}, frozenset({"pop"})))
    agg = aggregate(st_, GridSpec(0, 0, 2, 2, 1, 1))
    assert np.expm1(unstandardized(agg, "pop"))[0, 0] == pytest.approx(raw.mean())


def test_disaggregate_piecewise_constant():
    fine = GridSpec(0, 0, 1, 1, 4, 4)
    coarse = CovariateStack(GridSpec(0, 0, 2, 2, 2, 2), {"v": np.array([[1.0, 2.0], [3.0, 4.0]])})
    d = disaggregate(coarse, fine)
    assert d.layers["v"][0, 0] == 1 and d.layers["v"][1, 3] == 2 and d.layers["v"][3, 0] == 3


def test_interaction_layer():
    s = CovariateStack(GridSpec(0, 0, 1, 1, 3, 2), {"a": np.zeros((2, 3)), "b": np.arange(6.0).reshape(2, 3)})
    assert np.all(interaction_layer(s, "a", "b").layers["a*b"] == 0)
    sq = interaction_layer(s, "b", "b", "b2")
    assert np.array_equal(sq.layers["b2"], s.layers["b"] ** 2)
    with pytest.raises(KeyError):
        interaction_layer(s, "a", "c")
    g = GridSpec(0, 0, 1, 1, 5, 4)
    ramps = standardize(CovariateStack(g, coordinate_layers(g)))
    lonlat = interaction_layer(ramps, "lon", "lat")
    assert np.allclose(lonlat.layers["lon*lat"], ramps.layers["lon"] * ramps.layers["lat"])


def test_design_matrix_shapes():
    g = GridSpec(0, 0, 1, 1, 3, 3, np.eye(3, dtype=bool) | np.eye(3, k=1, dtype=bool))
    assert np.array_equal(design_matrix(CovariateStack(g, {})), np.ones((5, 1)))
    z = design_matrix(CovariateStack(g, {"zero": np.zeros((3, 3))}))
    assert z.shape == (5, 2) and np.all(z[:, 1] == 0)
    rng = np.random.default_rng(0)
    names = ["logpop", "elev", "mdis", "lon", "lat", "lon*lat"]
    six = CovariateStack(g, {n: rng.normal(size=(3, 3)) for n in names})
    assert design_matrix(six).shape == (5, 7)
    # rows follow flat cell order
    v = np.arange(9.0).reshape(3, 3)
    assert list(design_matrix(CovariateStack(g, {"v": v}))[:, 1]) == [0, 1, 4, 5, 8]


# ---------------------------------------------------------------- rasters

def test_ascii_grid_roundtrip_and_sampling(tmp_path):
    g = GridSpec(2.0, 4.0, 0.5, 0.5, 4, 3, np.array([[1, 1, 1, 1], [1, 0, 1, 1], [1, 1, 1, 1]], bool))
    v = np.arange(12.0).reshape(3, 4)
    write_ascii_grid(tmp_path / "r.asc", g, v)
    r = read_ascii_grid(tmp_path / "r.asc")
    assert (r.nrows, r.ncols) == (3, 4) and r.xll == 2.0 and r.yll == 4.0
    assert np.isnan(r.values[1, 1])
    assert r.values[0, 0] == 0 and r.values[2, 3] == 11
    assert r.sample(np.array([2.1, 3.9, 9.0]), np.array([4.1, 5.4, 4.1]))[:2].tolist() == [0.0, 11.0]
    assert np.isnan(r.sample(np.array([9.0]), np.array([4.1]))[0])


def test_read_ascii_grid_center_origin(tmp_path):
    (tmp_path / "c.asc").write_text("ncols 2\nnrows 2\nxllcenter 0.5\nyllcenter 0.5\ncellsize 1\n"
                                    "NODATA_value -1\n1 2\n3 -1\n")
    r = read_ascii_grid(tmp_path / "c.asc")
    assert r.xll == 0.0 and r.values[0, 0] == 3 and r.values[1, 1] == 2 and np.isnan(r.values[0, 1])
    (tmp_path / "bad.asc").write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2 3\n")
    with pytest.raises(ValueError, match="expected 4"):
        read_ascii_grid(tmp_path / "bad.asc")


def test_raster_layer_log_and_restrict_mask(tmp_path):
    proj = Projection(planar=True)
    g = GridSpec(0, 0, 1, 1, 2, 2)
    (tmp_path / "p.asc").write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n"
                                    "NODATA_value -9999\n0 -9999\n9 99\n")
    raw = raster_layer(read_ascii_grid(tmp_path / "p.asc"), g, proj)
    logged = raster_layer(read_ascii_grid(tmp_path / "p.asc"), g, proj, log=True)
    assert raw[0, 0] == 9 and np.isnan(raw[1, 1])
    assert logged[1, 0] == 0.0 and logged[0, 1] == pytest.approx(np.log(100))
    s = restrict_mask(CovariateStack(g, {"pop": logged}))
    assert s.grid.n_masked == 3 and not s.grid.mask[1, 1]


def test_cities_distance_layer(tmp_path):
    proj = Projection(planar=True)
    (tmp_path / "c.csv").write_text("name,lon,lat\nA,0.5,0.5\nB,3.5,0.5\n")
    sites = load_cities(tmp_path / "c.csv", proj)
    d = distance_layer(GridSpec(0, 0, 1, 1, 4, 1), sites)
    assert np.allclose(d[0], [0, 1, 1, 0])
