import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from geosdg import ingest
from geosdg.errors import ConfigError, FormatError, IngestError, ShapeError
from geosdg.ingest import Manifest, SurveyRecord, Tile, TileRecord


def _tile(raster, tid="t", cc=3.0, source="sentinel2", date="2021-03-15"):
    return Tile(tid, np.asarray(raster, np.float32), 1.5, 30.25, date, source, cc)


def _rec(tid, cc=0.0, source="sentinel2", rnd=7, lat=0.0, lon=0.0, loc=None):
    return TileRecord(tid, f"{tid}.gtil", lat, lon, "2020-01-01", source, cc, rnd, loc, "KEN")


tile_shapes = st.tuples(st.integers(1, 5), st.integers(1, 12), st.integers(1, 12))


@given(tile_shapes, st.integers(0, 2**32 - 1), st.sampled_from(ingest.SOURCES),
       st.floats(0, 100, width=32), st.text("0123456789-T:", max_size=25))
def test_tile_roundtrip_bit_exact(shape, seed, source, cc, date):
    raster = np.random.default_rng(seed).normal(size=shape).astype(np.float32)
    t = Tile("x", raster, -12.5, 170.0, date, source, cc)
    back = ingest.decode_tile(ingest.encode_tile(t), "x")
    assert back.raster.tobytes() == raster.tobytes()
    assert (back.lat, back.lon, back.date, back.source, back.cloud_cover) == (-12.5, 170.0, date, source, cc)


def test_tile_file_size_and_stem(tmp_path, rng):
    t = _tile(rng.normal(size=(3, 32, 32)))
    ingest.write_tile(tmp_path / "abc.gtil", t)
    assert (tmp_path / "abc.gtil").stat().st_size == ingest.header_size(t.date) + 3 * 32 * 32 * 4
    assert ingest.header_size("2021-03-15") == 50
    assert ingest.load_tile(tmp_path / "abc.gtil").tile_id == "abc"


def test_tile_corruption(rng):
    blob = ingest.encode_tile(_tile(rng.normal(size=(2, 4, 4))))
    with pytest.raises(FormatError, match="GTIL") as err:
        ingest.decode_tile(b"GTIX" + blob[4:])
    assert err.value.offset == 0
    with pytest.raises(FormatError):
        ingest.decode_tile(blob[:-1])
    with pytest.raises(FormatError):
        ingest.decode_tile(blob + b"\0")


@pytest.mark.parametrize("kw", [dict(lat=91.0), dict(cloud_cover=101.0), dict(source="modis")])
def test_tile_validation(kw, rng):
    base = dict(tile_id="t", raster=rng.normal(size=(1, 2, 2)), lat=0.0, lon=0.0, date="d",
                source="landsat8", cloud_cover=0.0)
    with pytest.raises(ConfigError):
        Tile(**{**base, **kw})
    with pytest.raises(ShapeError):
        Tile(**{**base, "raster": np.full((1, 2, 2), np.nan)})


# --- manifests ---------------------------------------------------------------------

def test_filter_cloud_examples():
    m = Manifest([_rec(f"t{i}", cc) for i, cc in enumerate([0, 5, 10, 15, 100])])
    assert [r.tile_id for r in ingest.filter_cloud(m)] == ["t0", "t1", "t2"]
    m2 = Manifest([_rec("a", 10.0), _rec("b", 10.1)])
    assert [r.tile_id for r in ingest.filter_cloud(m2)] == ["a"]
    assert len(ingest.filter_cloud(Manifest())) == 0


@given(st.lists(st.floats(0, 100), max_size=20), st.floats(0, 100), st.floats(0, 100))
def test_filter_cloud_composes(ccs, a, b):
    m = Manifest([_rec(f"t{i}", cc) for i, cc in enumerate(ccs)])
    twice = ingest.filter_cloud(ingest.filter_cloud(m, a), b)
    assert twice.records == ingest.filter_cloud(m, min(a, b)).records


def test_manifest_stats_examples():
    empty = ingest.manifest_stats(Manifest())
    assert set(empty) == {(s, r) for s in ingest.SOURCES for r in ingest.ROUNDS}
    assert all(v == 0 for v in empty.values())
    m = Manifest([_rec(f"s{i}", rnd=7) for i in range(3)] + [_rec(f"l{i}", source="landsat8", rnd=8) for i in range(2)])
    stats = ingest.manifest_stats(m)
    assert stats[("sentinel2", 7)] == 3 and stats[("landsat8", 8)] == 2 and sum(stats.values()) == 5


def test_manifest_roundtrip_and_errors(tmp_path):
    m = Manifest([_rec("a", 1.25, loc="L1"), _rec("b", 2.0)])
    ingest.write_manifest(tmp_path / "m.csv", m)
    back = ingest.read_manifest(tmp_path / "m.csv")
    assert back.records == m.records and back.root == tmp_path
    with pytest.raises(FormatError):
        Manifest([_rec("a"), _rec("a")])
    (tmp_path / "bad.csv").write_text(ingest.manifest_csv(m).replace("1.25", "x"))
    with pytest.raises(FormatError) as err:
        ingest.read_manifest(tmp_path / "bad.csv")
    assert err.value.row == 2
    with pytest.raises(IngestError) as err:
        back.load_all()
    assert len(err.value.paths) == 2


# --- radiometry --------------------------------------------------------------------------

def test_standardize_examples():
    const = _tile(np.full((1, 3, 3), 4.0))
    assert np.array_equal(ingest.standardize(const, ingest.compute_stats([const])).raster, np.zeros((1, 3, 3)))
    t = _tile(np.array([[[1.0, 3.0]]]))
    stats = ingest.compute_stats([t])
    assert stats.mean[0] == 2.0 and stats.std[0] == 1.0
    assert np.array_equal(ingest.standardize(t, stats).raster, [[[-1.0, 1.0]]])


@given(tile_shapes, st.integers(0, 2**32 - 1), st.floats(-1e3, 1e3), st.floats(1e-3, 1e3))
def test_standardize_properties(shape, seed, shift, scale):
    raster = np.random.default_rng(seed).normal(shift, scale, size=shape)
    t = _tile(raster)
    once = ingest.standardize(t, ingest.compute_stats([t]))
    assert once.raster.shape == shape and np.isfinite(once.raster).all()
    twice = ingest.standardize(once, ingest.compute_stats([once]))
    flat = once.raster.reshape(shape[0], -1)
    if np.all(flat.std(axis=1) > 0.5):
        assert np.allclose(twice.raster, once.raster, atol=1e-5)


def test_resample_identity_and_constant(rng):
    r = rng.normal(size=(2, 6, 6)).astype(np.float32)
    assert ingest.resample(r, 6, 6) is r
    up = ingest.resample(np.full((1, 4, 4), 3.0), 9, 7)
    assert up.shape == (1, 9, 7) and np.allclose(up, 3.0)
    assert ingest.harmonize(_tile(r), 12).raster.shape == (2, 12, 12)


# --- survey and join ----------------------------------------------------------------------

def test_survey_parse_errors():
    head = ",".join(ingest.SURVEY_HEADER) + "\n"
    good = ingest.parse_survey(head + "L1,1.0,2.0,8,1,0,1,BWA\n")
    assert good[0].label("piped_water") == 0 and good[0].label("sewage") == 1 and good[0].urban
    for bad in ["L1,1.0,2.0,6,1,0,1,BWA", "L1,x,2.0,8,1,0,1,BWA", "L1,1.0,2.0,8,2,0,1,BWA", "L1,1,2,8,1,0,1,"]:
        with pytest.raises(FormatError) as err:
            ingest.parse_survey(head + "L0,0,0,7,0,0,0,KEN\n" + bad + "\n")
        assert err.value.row == 3


def test_haversine_reference():
    # one degree of latitude on the 6371.0088 km sphere
    assert ingest.haversine_km(0.0, 0.0, 1.0, 0.0) == pytest.approx(6371.0088 * np.pi / 180)
    assert ingest.haversine_km(10.0, 20.0, 10.0, 20.0) == 0.0


def test_join_examples():
    deg_per_m = 1.0 / (6371.0088 * 1000 * np.pi / 180)
    survey = [SurveyRecord("S", 0.0, 0.0, 8, True, True, False, "KEN")]
    near = _rec("near", lat=500 * deg_per_m)
    far = _rec("far", lat=1500 * deg_per_m)
    linked = _rec("linked", lat=50.0, loc="S")
    rep = ingest.join_labels(Manifest([near, far, linked]), survey, 1000)
    assert [j.tile_id for j in rep.joined] == ["near", "linked"]
    assert rep.skipped == ["far"]
    assert rep.joined[0].distance_m == pytest.approx(500, abs=1e-6)
    assert rep.per_round == {7: 0, 8: 2, 9: 0}
    assert rep.labels("piped_water") == {"near": 1, "linked": 1}


def test_join_round_counts():
    survey = [SurveyRecord(f"L{i}", i * 1.0, 0.0, (7, 8, 9)[i % 3], False, False, False, "NGA") for i in range(9)]
    m = Manifest([_rec(f"t{i}", loc=f"L{i}") for i in range(9)] + [_rec("x", loc="L1")])
    assert ingest.join_labels(m, survey).per_round == {7: 3, 8: 4, 9: 3}


@given(st.integers(0, 2**32 - 1), st.floats(100, 50_000))
def test_join_respects_radius(seed, radius):
    rng = np.random.default_rng(seed)
    survey = [SurveyRecord(f"L{i}", float(a), float(b), 7, False, True, True, "ZMB")
              for i, (a, b) in enumerate(rng.uniform(-0.5, 0.5, size=(30, 2)))]
    m = Manifest([_rec(f"t{i}", lat=float(a), lon=float(b)) for i, (a, b) in enumerate(rng.uniform(-0.6, 0.6, size=(40, 2)))])
    rep = ingest.join_labels(m, survey, radius)
    joined = {j.tile_id for j in rep.joined}
    for rec in m:
        d = min(ingest.haversine_km(rec.lat, rec.lon, s.lat, s.lon) * 1000 for s in survey)
        assert (rec.tile_id in joined) == (d <= radius)


# --- synthetic corpus -------------------------------------------------------------------------

def test_synth_dataset_deterministic(tmp_path):
    cfg = ingest.SynthConfig(n_tiles=20, seed=9)
    ingest.synth_dataset(cfg).write(tmp_path / "a")
    ingest.synth_dataset(cfg).write(tmp_path / "b")
    for name in ["manifest.csv", "survey.csv"] + [f"tiles/t{i:05d}.gtil" for i in range(20)]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_balance_and_labels():
    ds = ingest.synth_dataset(ingest.SynthConfig(n_tiles=100, balance=0.5, seed=2))
    assert ds.served.sum() == 50
    assert all(s.piped_water == s.sewage == bool(v) for s, v in zip(ds.survey, ds.served))
    assert {s.round for s in ds.survey} == set(ingest.ROUNDS)


def test_synth_high_frequency_contrast():
    ds = ingest.synth_dataset(ingest.SynthConfig(seed=0))
    hf = np.array([ingest.high_frequency_energy(t.raster) for t in ds.tiles])
    assert hf[ds.served].mean() >= 2 * hf[~ds.served].mean()


def raw_pixel_1nn_accuracy(ds, holdout=0.25, seed=0):
    x = np.stack([t.raster.ravel() for t in ds.tiles]).astype(np.float64)
    y = np.array([s.piped_water for s in ds.survey], dtype=int)
    perm = np.random.default_rng(seed).permutation(len(y))
    n_val = int(len(y) * holdout)
    val, tr = perm[:n_val], perm[n_val:]
    d = ((x[val, None, :] - x[None, tr, :]) ** 2).sum(-1)
    return float((y[tr][d.argmin(1)] == y[val]).mean())


def test_raw_pixel_baseline_is_separable():
    ds = ingest.synth_dataset(ingest.SynthConfig(seed=0, label_noise=0.0))
    assert raw_pixel_1nn_accuracy(ds) >= 0.8
