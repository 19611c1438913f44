"""Tiles, manifests, survey labels and the synthetic desk dataset.

Tile file layout (little-endian)::

    b"GTIL" | u16 version | u16 bands | u32 H | u32 W | u8 dtype (0=float32)
    | f64 lat | f64 lon | u8 source (0=landsat8, 1=sentinel2)
    | u16 date_len | date (ascii ISO-8601) | f32 cloud_cover | band-major raster
"""

from __future__ import annotations

import csv
import io
import struct
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, FormatError, IngestError, ShapeError
from .numerics import bilinear_weights

TILE_MAGIC = b"GTIL"
TILE_VERSION = 1
SOURCES = ("landsat8", "sentinel2")
ROUNDS = (7, 8, 9)
TASKS = ("piped_water", "sewage")
EARTH_RADIUS_KM = 6371.0088

MANIFEST_HEADER = ["tile_id", "path", "lat", "lon", "date", "source", "cloud_cover",
                   "round", "location_id", "country"]
SURVEY_HEADER = ["location_id", "lat", "lon", "round", "urban", "piped_water", "sewage", "country"]

_HEAD = struct.Struct("<4sHHIIBddB")


@dataclass
class Tile:
    tile_id: str
    raster: np.ndarray
    lat: float
    lon: float
    date: str
    source: str
    cloud_cover: float

    def __post_init__(self):
        if self.raster.ndim != 3:
            raise ShapeError(f"raster must be (bands, H, W), got {self.raster.shape}")
        if not np.isfinite(self.raster).all():
            raise ShapeError(f"tile {self.tile_id}: raster has non-finite values")
        if not (-90 <= self.lat <= 90 and -180 <= self.lon <= 180):
            raise ConfigError(f"tile {self.tile_id}: coordinates out of range")
        if not 0 <= self.cloud_cover <= 100:
            raise ConfigError(f"tile {self.tile_id}: cloud_cover outside [0, 100]")
        if self.source not in SOURCES:
            raise ConfigError(f"tile {self.tile_id}: unknown source {self.source!r}")

    @property
    def bands(self) -> int:
        return self.raster.shape[0]


def encode_tile(tile: Tile) -> bytes:
    r = np.ascontiguousarray(tile.raster, dtype="<f4")
    b, h, w = r.shape
    date = tile.date.encode("ascii")
    head = _HEAD.pack(TILE_MAGIC, TILE_VERSION, b, h, w, 0, tile.lat, tile.lon,
                      SOURCES.index(tile.source))
    return head + struct.pack("<H", len(date)) + date + struct.pack("<f", tile.cloud_cover) + r.tobytes()


def header_size(date: str) -> int:
    return _HEAD.size + 2 + len(date.encode("ascii")) + 4


def write_tile(path, tile: Tile) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_tile(tile))


def decode_tile(buf: bytes, tile_id: str = "") -> Tile:
    if len(buf) < 4 or buf[:4] != TILE_MAGIC:
        raise FormatError(f"bad magic: expected {TILE_MAGIC.decode()!r}", offset=0)
    if len(buf) < _HEAD.size:
        raise FormatError(f"truncated header at byte {len(buf)}", offset=len(buf))
    _, version, b, h, w, dtype, lat, lon, src = _HEAD.unpack_from(buf, 0)
    if version != TILE_VERSION:
        raise FormatError(f"unsupported tile version {version}", offset=4)
    if dtype != 0:
        raise FormatError(f"unsupported dtype code {dtype}", offset=16)
    if src >= len(SOURCES):
        raise FormatError(f"unknown source code {src}", offset=_HEAD.size - 1)
    pos = _HEAD.size
    if len(buf) < pos + 2:
        raise FormatError(f"truncated at byte {len(buf)}", offset=len(buf))
    (dl,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    if len(buf) < pos + dl + 4:
        raise FormatError(f"truncated at byte {len(buf)}", offset=len(buf))
    date = buf[pos:pos + dl].decode("ascii")
    pos += dl
    (cc,) = struct.unpack_from("<f", buf, pos)
    pos += 4
    need = pos + 4 * b * h * w
    if len(buf) < need:
        raise FormatError(f"raster truncated at byte {len(buf)} (expected {need})", offset=len(buf))
    if len(buf) > need:
        raise FormatError(f"trailing bytes after offset {need}", offset=need)
    raster = np.frombuffer(buf, dtype="<f4", count=b * h * w, offset=pos).reshape(b, h, w).astype(np.float32)
    return Tile(tile_id, raster, lat, lon, date, SOURCES[src], float(cc))


def load_tile(path) -> Tile:
    path = Path(path)
    return decode_tile(path.read_bytes(), tile_id=path.stem)


# --- manifests ---------------------------------------------------------------

@dataclass(frozen=True)
class TileRecord:
    tile_id: str
    path: str
    lat: float
    lon: float
    date: str
    source: str
    cloud_cover: float
    round: int | None = None
    location_id: str | None = None
    country: str = ""


@dataclass
class Manifest:
    records: list[TileRecord] = field(default_factory=list)
    root: Path = Path(".")

    def __post_init__(self):
        ids = [r.tile_id for r in self.records]
        dup = [k for k, v in Counter(ids).items() if v > 1]
        if dup:
            raise FormatError(f"duplicate tile_ids: {', '.join(sorted(dup))}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, rec: TileRecord) -> Path:
        p = Path(rec.path)
        return p if p.is_absolute() else self.root / p

    def with_records(self, records) -> "Manifest":
        return Manifest(list(records), self.root)

    def load(self, rec: TileRecord) -> Tile:
        t = load_tile(self.resolve(rec))
        t.tile_id = rec.tile_id
        return t

    def load_all(self) -> list[Tile]:
        """Load every tile, raising one IngestError naming all unreadable paths."""
        tiles, bad = [], []
        for rec in self.records:
            try:
                tiles.append(self.load(rec))
            except (OSError, FormatError, ShapeError, ConfigError):
                bad.append(str(self.resolve(rec)))
        if bad:
            raise IngestError("unreadable tiles", bad)
        return tiles


def _opt(v: str):
    return v if v != "" else None


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise IngestError(f"cannot read manifest: {e}") from e
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != MANIFEST_HEADER:
        raise FormatError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}", row=1)
    records = []
    for i, row in enumerate(reader, start=2):
        try:
            records.append(TileRecord(
                tile_id=row["tile_id"], path=row["path"], lat=float(row["lat"]), lon=float(row["lon"]),
                date=row["date"], source=row["source"], cloud_cover=float(row["cloud_cover"]),
                round=int(row["round"]) if row["round"] else None,
                location_id=_opt(row["location_id"]), country=row["country"] or "",
            ))
        except (TypeError, ValueError) as e:
            raise FormatError(f"{path}: malformed row {i}: {e}", row=i) from None
    return Manifest(records, path.parent)


def manifest_csv(manifest: Manifest) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_HEADER)
    for r in manifest.records:
        w.writerow([r.tile_id, r.path, repr(r.lat), repr(r.lon), r.date, r.source, repr(r.cloud_cover),
                    "" if r.round is None else r.round, r.location_id or "", r.country])
    return buf.getvalue()


def write_manifest(path, manifest: Manifest) -> None:
    Path(path).write_text(manifest_csv(manifest))


def filter_cloud(manifest: Manifest, max_cc: float = 10.0) -> Manifest:
    if not 0 <= max_cc <= 100:
        raise ConfigError("max_cc must lie in [0, 100]")
    return manifest.with_records(r for r in manifest.records if r.cloud_cover <= max_cc)


def manifest_stats(manifest: Manifest) -> dict[tuple[str, int], int]:
    """Image counts keyed by (source, round); every source x round cell present."""
    counts = {(s, r): 0 for s in SOURCES for r in ROUNDS}
    for rec in manifest.records:
        key = (rec.source, rec.round)
        counts[key] = counts.get(key, 0) + 1
    return counts


# --- radiometry --------------------------------------------------------------

@dataclass(frozen=True)
class BandStats:
    mean: np.ndarray
    std: np.ndarray

    @property
    def bands(self) -> int:
        return len(self.mean)


def compute_stats(tiles: Iterable[Tile] | Manifest) -> BandStats:
    """Per-band population mean and std, accumulated in float64."""
    if isinstance(tiles, Manifest):
        tiles = (tiles.load(r) for r in tiles.records)
    # per-tile two-pass moments merged pairwise; the one-pass sum of squares
    # cancels badly when a band's offset dwarfs its spread
    n = 0
    mean = m2 = None
    for t in tiles:
        r = t.raster.astype(np.float64).reshape(t.bands, -1)
        if mean is None:
            mean, m2 = np.zeros(t.bands), np.zeros(t.bands)
        elif len(mean) != t.bands:
            raise ShapeError(f"tile {t.tile_id} has {t.bands} bands, expected {len(mean)}")
        k = r.shape[1]
        tm = r.mean(axis=1)
        tm2 = ((r - tm[:, None]) ** 2).sum(axis=1)
        delta = tm - mean
        tot = n + k
        mean = mean + delta * (k / tot)
        m2 = m2 + tm2 + delta * delta * (n * k / tot)
        n = tot
    if not n:
        raise ShapeError("cannot compute band statistics of an empty set")
    return BandStats(mean, np.sqrt(m2 / n))


def standardize(tile: Tile, stats: BandStats, eps: float = 1e-6) -> Tile:
    if tile.bands != stats.bands:
        raise ShapeError(f"tile has {tile.bands} bands, stats have {stats.bands}")
    m = stats.mean[:, None, None]
    sd = np.maximum(stats.std, eps)[:, None, None]
    out = ((tile.raster.astype(np.float64) - m) / sd).astype(np.float32)
    return replace(tile, raster=out)


def resample(raster: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resample of a ``(bands, H, W)`` raster onto an ``height x width`` grid."""
    _, h, w = raster.shape
    if (h, w) == (height, width):
        return raster
    wr = bilinear_weights(h, height)
    wc = bilinear_weights(w, width)
    out = np.einsum("ij,bjk,lk->bil", wr, raster.astype(np.float64), wc)
    return out.astype(raster.dtype)


def harmonize(tile: Tile, size: int) -> Tile:
    """Put a tile on the run's common pixel grid (merged Landsat/Sentinel sets)."""
    return replace(tile, raster=resample(tile.raster, size, size))


# --- survey labels -----------------------------------------------------------

@dataclass(frozen=True)
class SurveyRecord:
    location_id: str
    lat: float
    lon: float
    round: int
    urban: bool
    piped_water: bool
    sewage: bool
    country: str

    def label(self, task: str) -> int:
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}")
        return int(getattr(self, task))


def _flag(v: str) -> bool:
    if v not in ("0", "1"):
        raise ValueError(f"boolean field must be 0 or 1, got {v!r}")
    return v == "1"


def parse_survey(text: str, source: str = "survey") -> list[SurveyRecord]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != SURVEY_HEADER:
        raise FormatError(f"{source}: survey header must be {','.join(SURVEY_HEADER)}", row=1)
    out = []
    for i, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            if len(row) != len(SURVEY_HEADER):
                raise ValueError(f"expected {len(SURVEY_HEADER)} fields, got {len(row)}")
            loc, lat, lon, rnd, urban, piped, sew, country = row
            rnd = int(rnd)
            if rnd not in ROUNDS:
                raise ValueError(f"round must be one of {ROUNDS}")
            if not country:
                raise ValueError("country is empty")
            out.append(SurveyRecord(loc, float(lat), float(lon), rnd, _flag(urban), _flag(piped),
                                    _flag(sew), country))
        except ValueError as e:
            raise FormatError(f"{source}: malformed row {i}: {e}", row=i) from None
    return out


def read_survey(path) -> list[SurveyRecord]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IngestError(f"cannot read survey CSV: {e}") from e
    return parse_survey(text, str(path))


def survey_csv(records: Sequence[SurveyRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SURVEY_HEADER)
    for r in records:
        w.writerow([r.location_id, repr(r.lat), repr(r.lon), r.round, int(r.urban),
                    int(r.piped_water), int(r.sewage), r.country])
    return buf.getvalue()


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance on a sphere of radius 6371.0088 km (broadcasts)."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dp / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


@dataclass(frozen=True)
class LabeledTile:
    tile_id: str
    record: SurveyRecord
    distance_m: float

    def label(self, task: str) -> int:
        return self.record.label(task)


@dataclass
class JoinReport:
    joined: list[LabeledTile]
    skipped: list[str]
    per_round: dict[int, int]

    def labels(self, task: str) -> dict[str, int]:
        return {j.tile_id: j.label(task) for j in self.joined}


def join_labels(manifest: Manifest, survey: Sequence[SurveyRecord], radius_m: float = 1000.0) -> JoinReport:
    """Attach survey labels to tiles.

    Tiles carrying a ``location_id`` link join on it directly; the rest take
    the nearest survey point within ``radius_m`` (haversine), ties to the
    earlier survey row. Unmatched tiles go to ``skipped`` in manifest order.
    """
    if not radius_m > 0:
        raise ConfigError("radius_m must be positive")
    by_id = {r.location_id: r for r in survey}
    lats = np.array([r.lat for r in survey], dtype=np.float64)
    lons = np.array([r.lon for r in survey], dtype=np.float64)
    joined, skipped = [], []
    for rec in manifest.records:
        if rec.location_id is not None:
            hit = by_id.get(rec.location_id)
            if hit is None:
                skipped.append(rec.tile_id)
            else:
                joined.append(LabeledTile(rec.tile_id, hit, 0.0))
            continue
        if not survey:
            skipped.append(rec.tile_id)
            continue
        d = haversine_km(rec.lat, rec.lon, lats, lons) * 1000.0
        j = int(np.argmin(d))
        if d[j] <= radius_m:
            joined.append(LabeledTile(rec.tile_id, survey[j], float(d[j])))
        else:
            skipped.append(rec.tile_id)
    per_round = {r: 0 for r in ROUNDS}
    for j in joined:
        per_round[j.record.round] += 1
    return JoinReport(joined, skipped, per_round)


# --- synthetic dataset -------------------------------------------------------

_COUNTRY_BOXES = {
    "BWA": (-24.5, 25.5), "KEN": (-0.5, 37.0), "NGA": (9.0, 8.0),
    "SEN": (14.5, -14.5), "TZA": (-6.5, 35.0), "ZMB": (-14.0, 27.5),
}


@dataclass(frozen=True)
class SynthConfig:
    n_tiles: int = 400
    balance: float = 0.5
    label_noise: float = 0.0
    size: int = 32
    bands: int = 3
    cloudy_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_tiles < 2:
            raise ConfigError("n_tiles must be at least 2")
        if not 0 <= self.balance <= 1 or not 0 <= self.label_noise <= 1:
            raise ConfigError("balance and label_noise must lie in [0, 1]")
        if not 0 <= self.cloudy_fraction <= 1:
            raise ConfigError("cloudy_fraction must lie in [0, 1]")


def _smooth_field(rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    f = np.zeros((size, size))
    for _ in range(3):
        fx, fy = rng.uniform(0.3, 1.5, size=2)
        f += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    return f / 3.0


def _grid_field(rng, size: int) -> np.ndarray:
    """Road grid with blocks of varied brightness: strong high-frequency edges."""
    period = int(rng.integers(4, 8))
    width = int(rng.integers(1, 3))
    ox, oy = rng.integers(0, period, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    roads = (((xx + ox) % period) < width) | (((yy + oy) % period) < width)
    blocks = rng.uniform(-0.9, 0.9, size=(size // period + 2, size // period + 2))
    f = blocks[(yy + oy) // period, (xx + ox) // period]
    return np.where(roads, 1.5, f)


_SERVED_SIGNATURE = np.array([0.105, -0.075, 0.06])
_UNSERVED_SIGNATURE = np.array([-0.06, 0.09, -0.045])


def synth_tile(rng: np.random.Generator, served: bool, size: int, bands: int) -> np.ndarray:
    sig = _SERVED_SIGNATURE if served else _UNSERVED_SIGNATURE
    sig = np.resize(sig, bands)
    base = _grid_field(rng, size) if served else _smooth_field(rng, size)
    gain = rng.uniform(0.6, 1.2, size=bands)
    shift = rng.normal(0.0, 0.4, size=bands)
    raster = sig[:, None, None] + shift[:, None, None] + gain[:, None, None] * base[None]
    raster += rng.normal(0.0, 0.1, size=(bands, size, size))
    return raster.astype(np.float32)


def high_frequency_energy(raster: np.ndarray) -> float:
    r = raster.astype(np.float64)
    return float((np.diff(r, axis=1) ** 2).sum() + (np.diff(r, axis=2) ** 2).sum())


@dataclass
class SynthDataset:
    tiles: list[Tile]
    manifest: Manifest
    survey: list[SurveyRecord]
    served: np.ndarray

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        for t, rec in zip(self.tiles, self.manifest.records):
            write_tile(out / rec.path, t)
        write_manifest(out / "manifest.csv", Manifest(self.manifest.records, out))
        (out / "survey.csv").write_text(survey_csv(self.survey))


def synth_dataset(cfg: SynthConfig) -> SynthDataset:
    """Procedural served/unserved tiles with one survey location per tile.

    "Served" tiles carry a road grid (high-frequency structure) and an
    urban spectral signature; "unserved" tiles are smooth low-frequency
    fields. Labels for both tasks follow the class, flipped independently
    with probability ``label_noise``.
    """
    rng = np.random.default_rng(cfg.seed)
    n_served = int(round(cfg.n_tiles * cfg.balance))
    served = np.zeros(cfg.n_tiles, dtype=bool)
    served[:n_served] = True
    served = served[rng.permutation(cfg.n_tiles)]
    countries = sorted(_COUNTRY_BOXES)
    tiles, records, survey = [], [], []
    for i in range(cfg.n_tiles):
        country = countries[i % len(countries)]
        clat, clon = _COUNTRY_BOXES[country]
        lat = round(float(clat + rng.uniform(-2, 2)), 6)
        lon = round(float(clon + rng.uniform(-2, 2)), 6)
        rnd = ROUNDS[i % 3]
        source = SOURCES[int(rng.integers(0, 2))]
        month = int(rng.integers(1, 13))
        date = f"{2019 + 2 * ROUNDS.index(rnd)}-{month:02d}-15"
        cloudy = rng.random() < cfg.cloudy_fraction
        cc = float(np.float32(rng.uniform(10.5, 60.0) if cloudy else rng.uniform(0.0, 10.0)))
        tid, loc = f"t{i:05d}", f"L{i:05d}"
        raster = synth_tile(rng, bool(served[i]), cfg.size, cfg.bands)
        tiles.append(Tile(tid, raster, lat, lon, date, source, cc))
        records.append(TileRecord(tid, f"tiles/{tid}.gtil", lat, lon, date, source, cc, rnd, loc, country))
        flip = rng.random(2) < cfg.label_noise
        piped = bool(served[i]) ^ bool(flip[0])
        sewage = bool(served[i]) ^ bool(flip[1])
        urban = bool(served[i]) if rng.random() >= 0.1 else not served[i]
        survey.append(SurveyRecord(loc, lat, lon, rnd, urban, piped, sewage, country))
    return SynthDataset(tiles, Manifest(records), survey, served)
