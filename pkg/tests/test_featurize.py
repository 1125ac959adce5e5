import math
from collections import Counter

import numpy as np
import pytest

from dynlsm.data_model import FEATURE_INDEX, FeatureVector, GridGeometry, LabeledSample
from dynlsm.errors import ConfigError, DataError
from dynlsm.featurize import (
    Featurizer,
    StationRecord,
    ThematicStack,
    VectorFeature,
    dist_to_lines,
    featurize_inventory,
    generate_negatives,
    idw_rainfall,
    impute,
    landslide_frequency,
    polygon_score,
    read_landslides_csv,
    read_ndjson,
    read_stations_csv,
    sample_raster,
    tercile_scores,
    write_landslides_csv,
    write_ndjson,
    write_stations_csv,
)


def square(x0, y0, size, cid, cat):
    return VectorFeature(cid, cat, [[x0, y0], [x0 + size, y0], [x0 + size, y0 + size], [x0, y0 + size], [x0, y0]])


def small_stack(nrows=20, ncols=20, cellsize=10.0, seed=0):
    rng = np.random.default_rng(seed)
    g = GridGeometry(0.0, 0.0, cellsize, nrows, ncols)
    shape = g.shape
    rasters = {
        "elev": rng.uniform(0, 500, shape),
        "slope": rng.uniform(0, 40, shape),
        "curv": rng.normal(0, 1, shape),
        "aspect": rng.uniform(0, 360, shape),
        "ndvi": rng.uniform(-1000, 8000, shape),
        "spi": rng.gamma(2, 5, shape),
        "twi": rng.normal(6, 1, shape),
    }
    rasters["elev"][0, 0] = np.nan
    W, H = ncols * cellsize, nrows * cellsize
    lines = {
        "faults": [VectorFeature("f1", "", [[0, H / 2], [W, H / 2]])],
        "drainage": [VectorFeature("d1", "", [[W / 2, 0], [W / 2, H]])],
        "roads": [VectorFeature("r1", "", [[0, 0], [W, H]])],
    }
    halves = [square(0, 0, W / 2, "a", "A"), square(W / 2, 0, W / 2, "b", "B")]
    polygons = {
        "litho": [square(0, 0, W / 2, "l1", "schist"), square(W / 2, 0, W / 2, "l2", "granite")]
        + [square(0, W / 2, W / 2, "l3", "shale"), square(W / 2, W / 2, W / 2, "l4", "alluvium")],
        "landuse": halves,
        "catchment": [square(0, 0, W, "c1", "")],
    }
    stations = [
        StationRecord((0.0, 0.0), 2000, 2000.0, 5.0),
        StationRecord((W, H), 2000, 3000.0, 15.0),
        StationRecord((0.0, 0.0), 2001, 1000.0, 1.0),
    ]
    return ThematicStack(g, rasters, lines, polygons, stations)


# --- rasters ---------------------------------------------------------------


def test_sample_raster_cell_value():
    st = small_stack()
    vals = sample_raster(st, (15.0, 185.0))  # row 1, col 1
    assert vals["slope"] == st.rasters["slope"][1, 1]


def test_sample_raster_outside_and_nodata_are_missing():
    st = small_stack()
    assert all(math.isnan(v) for v in sample_raster(st, (-5.0, 5.0)).values())
    assert math.isnan(sample_raster(st, (5.0, 195.0))["elev"])


def test_stack_rejects_mismatched_raster():
    st = small_stack()
    bad = dict(st.rasters, slope=np.zeros((3, 3)))
    with pytest.raises(DataError):
        ThematicStack(st.geometry, bad, st.lines, st.polygons)


# --- lines -----------------------------------------------------------------


def brute_segment_distance(p, a, b, k=200001):
    t = np.linspace(0, 1, k)
    pts = np.asarray(a)[None, :] + t[:, None] * (np.asarray(b) - np.asarray(a))[None, :]
    return float(np.min(np.hypot(pts[:, 0] - p[0], pts[:, 1] - p[1])))


def test_dist_to_lines_matches_dense_sampling(rng):
    line = VectorFeature("x", "", [[0, 0], [10, 5], [20, -3]])
    for _ in range(20):
        p = rng.uniform(-10, 30, 2)
        want = min(brute_segment_distance(p, [0, 0], [10, 5]), brute_segment_distance(p, [10, 5], [20, -3]))
        assert dist_to_lines([line], p) == pytest.approx(want, abs=1e-3)


def test_dist_to_lines_examples():
    line = VectorFeature("h", "", [[0, 0], [10, 0]])
    assert dist_to_lines([line], (5, 3)) == pytest.approx(3.0)
    assert dist_to_lines([line], (13, 4)) == pytest.approx(5.0)
    assert dist_to_lines([line], (5, 0)) == 0.0


def test_dist_to_lines_empty_layer():
    with pytest.raises(ConfigError):
        dist_to_lines([], (0, 0))


def test_vector_feature_needs_two_vertices():
    with pytest.raises(DataError):
        VectorFeature("x", "", [[0, 0]])


# --- polygons --------------------------------------------------------------


def test_polygon_area_shoelace():
    assert square(0, 0, 3, "s", "c").area() == pytest.approx(9.0)
    tri = VectorFeature("t", "c", [[0, 0], [4, 0], [0, 3]])
    assert tri.area() == pytest.approx(6.0)


def test_landslide_frequency_count_over_area():
    polys = [square(0, 0, 10, "a", "A"), square(10, 0, 20, "b", "B")]
    pts = np.array([[1, 1], [2, 2], [15, 5], [50, 50]])
    freq = landslide_frequency(polys, pts)
    assert freq["A"] == pytest.approx(2 / 100)
    assert freq["B"] == pytest.approx(1 / 400)


def test_tercile_scores():
    assert tercile_scores({"a": 0.1, "b": 0.5, "c": 0.9}) == {"a": 1, "b": 2, "c": 3}
    assert tercile_scores({"only": 1.0}) == {"only": 2}
    six = {c: f for c, f in zip("abcdef", [6, 5, 4, 3, 2, 1])}
    assert tercile_scores(six) == {"f": 1, "e": 1, "d": 2, "c": 2, "b": 3, "a": 3}


def test_tercile_ties_break_by_name():
    assert tercile_scores({"z": 0.0, "a": 0.0, "m": 0.0}) == {"a": 1, "m": 2, "z": 3}


def test_polygon_score_and_outside():
    polys = [square(0, 0, 10, "a", "A"), square(10, 0, 10, "b", "B"), square(20, 0, 10, "c", "C")]
    freq = {"A": 0.3, "B": 0.1, "C": 0.2}
    assert polygon_score(polys, (5, 5), freq) == 3
    assert polygon_score(polys, (15, 5), freq) == 1
    assert polygon_score(polys, (25, 5), freq) == 2
    assert math.isnan(polygon_score(polys, (50, 5), freq))


# --- rainfall --------------------------------------------------------------


def test_idw_exact_at_station_and_midpoint():
    g = GridGeometry(0.0, 0.0, 10.0, 1, 3)  # centers at x = 5, 15, 25; y = 5
    st = [StationRecord((5.0, 5.0), 2000, 100.0, 2.0), StationRecord((25.0, 5.0), 2000, 300.0, 6.0)]
    ar, aerd = idw_rainfall(st, g)
    assert ar[0, 0] == 100.0 and ar[0, 2] == 300.0
    assert ar[0, 1] == pytest.approx(200.0)
    assert aerd[0, 1] == pytest.approx(4.0)


def test_idw_weights_inverse_square():
    g = GridGeometry(0.0, 0.0, 1.0, 1, 1)  # center (0.5, 0.5)
    st = [StationRecord((1.5, 0.5), 2000, 10.0, 0.0), StationRecord((2.5, 0.5), 2000, 20.0, 0.0)]
    ar, _ = idw_rainfall(st, g)
    w1, w2 = 1 / 1.0, 1 / 4.0
    assert ar[0, 0] == pytest.approx((w1 * 10 + w2 * 20) / (w1 + w2))


def test_idw_no_stations():
    with pytest.raises(ConfigError):
        idw_rainfall([], GridGeometry(0, 0, 1, 2, 2))


# --- imputation ------------------------------------------------------------


def test_impute_fills_means():
    a = np.full(15, 1.0)
    b = np.full(15, 3.0)
    a[FEATURE_INDEX["slope"]] = np.nan
    filled, means = impute([FeatureVector(tuple(a)), FeatureVector(tuple(b))])
    assert filled[0]["slope"] == 3.0
    assert means[FEATURE_INDEX["elev"]] == 2.0
    assert all(f.complete for f in filled)


def test_impute_all_missing_dimension_named():
    a = np.full(15, 1.0)
    a[FEATURE_INDEX["twi"]] = np.nan
    with pytest.raises(DataError, match="twi"):
        impute([FeatureVector(tuple(a))] * 3)


# --- featurizer and negatives ---------------------------------------------


def positives(stack, n=12, seed=3):
    rng = np.random.default_rng(seed)
    cx, cy = stack.geometry.cell_centers()
    cells = rng.choice(np.arange(1, cx.size), size=n, replace=False)
    years = [2000] * (n - n // 3) + [2001] * (n // 3)
    feat = Featurizer(stack, np.column_stack([cx[cells], cy[cells]]))
    X = feat.features(np.column_stack([cx[cells], cy[cells]]), years)
    samples = [
        LabeledSample(FeatureVector(tuple(X[i])), 1, years[i], (cx[cells[i]], cy[cells[i]]), sid=i) for i in range(n)
    ]
    return samples, feat


def test_featurizer_columns():
    st = small_stack()
    feat = Featurizer(st, np.array([[10.0, 10.0]]))
    X = feat.features(np.array([[55.0, 45.0]]), [2000])
    assert X[0, FEATURE_INDEX["slope"]] == st.rasters["slope"][15, 5]
    assert X[0, FEATURE_INDEX["d_fault"]] == pytest.approx(55.0)
    assert X[0, FEATURE_INDEX["d_drain"]] == pytest.approx(45.0)
    assert X[0, FEATURE_INDEX["d_catch"]] == pytest.approx(45.0)
    assert X[0, FEATURE_INDEX["d_road"]] == pytest.approx(10.0 / math.sqrt(2))
    assert X[0, FEATURE_INDEX["litho"]] in (1.0, 2.0, 3.0)
    assert 2000 < X[0, FEATURE_INDEX["ar"]] < 3000
    # no stations for this year -> missing rainfall
    X2 = feat.features(np.array([[55.0, 45.0]]), [1999])
    assert math.isnan(X2[0, FEATURE_INDEX["ar"]])


def test_grid_features_mask():
    st = small_stack()
    feat = Featurizer(st, np.array([[10.0, 10.0]]))
    X, area = feat.grid_features(2000)
    assert X.shape == (400, 15)
    assert not area[0] and area[1:].all()
    X2, _ = feat.grid_features(2001)
    assert np.array_equal(X[:, :9], X2[:, :9], equal_nan=True)
    assert not np.array_equal(X[:, FEATURE_INDEX["ar"]], X2[:, FEATURE_INDEX["ar"]])


def test_generate_negatives_invariants():
    st = small_stack()
    pos, feat = positives(st)
    neg = generate_negatives(pos, feat, seed=7)
    assert len(neg) == len(pos)
    assert all(s.label == 0 for s in neg)
    g = st.geometry
    cell = lambda s: tuple(int(v) for v in g.cell_index(*s.location))
    pos_cells = {cell(s) for s in pos}
    neg_cells = [cell(s) for s in neg]
    assert len(set(neg_cells)) == len(neg_cells)
    assert not pos_cells & set(neg_cells)
    assert Counter(s.year for s in neg) == Counter(s.year for s in pos)
    assert len({s.sid for s in pos + neg}) == 2 * len(pos)
    # elevation nodata cell never used
    assert (0, 0) not in neg_cells


def test_generate_negatives_prioritized_half_is_gentle():
    st = small_stack()
    pos, feat = positives(st, n=20)
    neg = generate_negatives(pos, feat, seed=1, slope_threshold=15.0)
    prioritized = neg[10:]
    assert all(s.features["slope"] < 15.0 for s in prioritized)


def test_generate_negatives_deterministic():
    st = small_stack()
    pos, feat = positives(st)
    a = generate_negatives(pos, feat, seed=5)
    b = generate_negatives(pos, feat, seed=5)
    c = generate_negatives(pos, feat, seed=6)
    assert [s.location for s in a] == [s.location for s in b]
    assert [s.location for s in a] != [s.location for s in c]


def test_generate_negatives_not_enough_cells():
    st = small_stack(nrows=2, ncols=2)
    cx, cy = st.geometry.cell_centers()
    feat = Featurizer(st, np.column_stack([cx, cy]))
    pos = [LabeledSample(FeatureVector.missing_all(), 1, 2000, (cx[i], cy[i]), sid=i) for i in (1, 2, 3)]
    with pytest.raises(DataError):
        generate_negatives(pos, feat)


def test_featurize_inventory_balanced_and_complete():
    st = small_stack()
    cx, cy = st.geometry.cell_centers()
    records = [(2000, cx[i], cy[i]) for i in range(5, 25)] + [(2001, cx[i], cy[i]) for i in range(30, 36)]
    samples, manifest, _ = featurize_inventory(records, st, seed=0)
    assert len(samples) == 52
    assert all(s.features.complete for s in samples)
    assert manifest["per_year"]["2000"] == {"positive": 20, "negative": 20}
    assert manifest["per_year"]["2001"] == {"positive": 6, "negative": 6}
    again, _, _ = featurize_inventory(records, st, seed=0)
    assert [s.to_dict() for s in again] == [s.to_dict() for s in samples]


def test_featurize_inventory_empty():
    with pytest.raises(DataError):
        featurize_inventory([], small_stack())


# --- file formats ----------------------------------------------------------


def test_ndjson_round_trip(tmp_path):
    feats = [square(0, 0, 1.5, "a", "granite"), VectorFeature("b", "", [[0.1, 0.2], [3.3, 4.4]])]
    write_ndjson(tmp_path / "x.ndjson", feats)
    back = read_ndjson(tmp_path / "x.ndjson")
    assert [(f.id, f.category) for f in back] == [("a", "granite"), ("b", "")]
    assert np.array_equal(back[1].coords, feats[1].coords)


def test_ndjson_bad_line(tmp_path):
    (tmp_path / "bad.ndjson").write_text('{"id": 1}\n')
    with pytest.raises(DataError):
        read_ndjson(tmp_path / "bad.ndjson")


def test_station_and_landslide_csv_round_trip(tmp_path):
    st = [StationRecord((1.25, 2.5), 1999, 2100.5, 7.0)]
    write_stations_csv(tmp_path / "s.csv", st)
    assert read_stations_csv(tmp_path / "s.csv") == st
    recs = [(2000, 1.5, 2.25), (2001, 3.0, 4.0)]
    write_landslides_csv(tmp_path / "l.csv", recs)
    assert read_landslides_csv(tmp_path / "l.csv") == recs


def test_station_negative_rainfall():
    with pytest.raises(DataError):
        StationRecord((0, 0), 2000, -1.0, 0.0)
