"""Command-line entry point: ``geosdg <command> [flags]``.

Every command takes ``--seed``, ``--config``, ``--preset`` and ``--out-dir``.
A config file holds ``key = value`` lines naming long flags (dashes or
underscores); explicit flags win over file values. Log records go to stderr
as ``geosdg|LEVEL|command|message`` lines and results to stdout as
``result|command|key=value`` lines.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import aggregate as agg
from . import dino, ingest, knn, vit
from .errors import (ConfigError, DegenerateFit, DegenerateIndex, FormatError, IngestError, InvalidValue,
                     NumericalError, ShapeError)

EXIT_OK, EXIT_CONFIG, EXIT_INGEST, EXIT_NUMERICAL, EXIT_DEGENERATE = 0, 2, 3, 4, 5
TASK_CHOICES = ("piped_water", "sewage", "both")

log = logging.getLogger("geosdg")


def _tasks(sel: str) -> tuple[str, ...]:
    return ingest.TASKS if sel == "both" else (sel,)


def _result(cmd: str, **kv) -> None:
    print(f"result|{cmd}|" + " ".join(f"{k}={v}" for k, v in kv.items()), flush=True)


def _need(args, *flags: str) -> None:
    """Check input paths before any compute; missing files are ingest failures."""
    missing = []
    for flag in flags:
        val = getattr(args, flag)
        if val is not None and not Path(val).exists():
            missing.append(f"--{flag.replace('_', '-')}={val}")
    if missing:
        raise IngestError("input paths do not exist", missing)


def _write(path: Path, text: str) -> Path:
    vit._atomic_write(path, text.encode())
    log.info("wrote path=%s", path)
    return path


def _index(table: knn.EmbeddingTable, task: str, normalize: bool) -> knn.KnnIndex:
    """Build an index, logging a single-class warning instead of emitting it."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateIndex)
        index = table.index(task, normalize=normalize)
    for w in caught:
        log.warning("degenerate_index task=%s %s", task, w.message)
    return index


# --- checkpoints and tiles -----------------------------------------------------

def _load_model(args):
    """Parameters plus band statistics (``None`` when the checkpoint has none)."""
    if args.checkpoint is None:
        cfg = vit.preset(args.preset)
        log.info("checkpoint=none init=random preset=%s seed=%d", args.preset, args.seed)
        return vit.init_params(cfg, args.seed), None
    try:
        _, _, meta = vit.decode_checkpoint(Path(args.checkpoint).read_bytes())
    except OSError as e:
        raise IngestError(f"cannot read checkpoint: {e}", [args.checkpoint]) from e
    params = vit.load_params(args.checkpoint)
    stats = None
    if "band_mean" in meta:
        stats = ingest.BandStats(np.array(meta["band_mean"]), np.array(meta["band_std"]))
    return params, stats


def _standardized(tiles, cfg: vit.ModelConfig, stats):
    tiles = [ingest.harmonize(t, cfg.image_size) for t in tiles]
    for t in tiles:
        if t.bands != cfg.bands:
            raise ShapeError(f"tile {t.tile_id} has {t.bands} bands, model expects {cfg.bands}")
    if stats is None:
        stats = ingest.compute_stats(tiles)
    return np.stack([ingest.standardize(t, stats).raster for t in tiles])


# --- commands ------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    cfg = ingest.SynthConfig(n_tiles=args.n_tiles, balance=args.balance, label_noise=args.label_noise,
                             size=args.size, bands=args.bands, cloudy_fraction=args.cloudy_fraction,
                             seed=args.seed)
    ds = ingest.synth_dataset(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds.write(out)
    log.info("tiles=%d served=%d", len(ds.tiles), int(ds.served.sum()))
    _result("synth-data", tiles=len(ds.tiles), manifest=out / "manifest.csv", survey=out / "survey.csv")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    _need(args, "manifest", "resume")
    manifest = ingest.read_manifest(args.manifest)
    tcfg = dino.TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, min_lr=args.min_lr,
                            weight_decay=args.weight_decay, weight_decay_end=args.weight_decay_end,
                            seed=args.seed, max_cloud=args.max_cloud, save_every=args.save_every,
                            log_every=args.log_every, strict=not args.no_strict)
    res = dino.pretrain(vit.preset(args.preset), manifest, tcfg, args.out_dir,
                        resume=args.resume, stop_at=args.stop_at)
    final = res.log[-1] if res.log else None
    _result("pretrain", checkpoint=res.checkpoint, steps=res.state.step,
            final_loss=f"{final.loss:.6f}" if final else "nan", collapse_warnings=len(res.warnings))
    return EXIT_OK


def cmd_embed(args) -> int:
    _need(args, "manifest", "checkpoint", "survey")
    params, stats = _load_model(args)
    cfg = params.config
    manifest = ingest.filter_cloud(ingest.read_manifest(args.manifest), args.max_cloud)
    recs = sorted(manifest.records, key=lambda r: r.tile_id)
    labels = {t: {} for t in _tasks(args.task)}
    if args.survey is not None:
        report = ingest.join_labels(manifest, ingest.read_survey(args.survey), args.radius_m)
        for t in labels:
            labels[t] = report.labels(t)
        log.info("joined=%d skipped=%d", len(report.joined), len(report.skipped))
    if recs:
        images = _standardized(manifest.with_records(recs).load_all(), cfg, stats)
        emb = np.concatenate([vit.embed_batch(params, images[s:s + args.batch], args.pool)
                              for s in range(0, len(images), args.batch)]).astype(np.float32)
    else:
        emb = np.zeros((0, cfg.dim), dtype=np.float32)
    ids, tasks, labs, rows = [], [], [], []
    for i, rec in enumerate(recs):
        for t in labels:
            ids.append(rec.tile_id)
            tasks.append(t)
            labs.append(labels[t].get(rec.tile_id))
            rows.append(emb[i])
    table = knn.EmbeddingTable(ids, tasks, labs, np.array(rows, dtype=np.float32).reshape(len(rows), cfg.dim))
    path = _write(Path(args.out_dir) / "embeddings.csv", knn.embeddings_csv(table))
    _result("embed", rows=len(table), dim=cfg.dim, path=path)
    return EXIT_OK


def _split(table: knn.EmbeddingTable, frac: float, seed: int):
    n = len(table)
    if not 0 < frac < 1:
        raise ConfigError("--val-frac must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(frac * n)))
    val, train = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    pick = lambda idx: knn.EmbeddingTable([table.row_ids[i] for i in idx], [table.tasks[i] for i in idx],  # noqa: E731
                                          [table.labels[i] for i in idx], table.embeddings[idx])
    return pick(train), pick(val)


def _parse_ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(k) for k in text.split(",") if k.strip())
    except ValueError:
        raise ConfigError(f"--ks must be comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise ConfigError("--ks needs positive integers")
    return ks


def cmd_knn_eval(args) -> int:
    _need(args, "embeddings", "validation")
    ks = _parse_ks(args.ks)
    full = knn.read_embeddings(args.embeddings)
    for task in _tasks(args.task):
        table = full.select(task).labeled()
        if args.validation is not None:
            train, val = table, knn.read_embeddings(args.validation).select(task).labeled()
        else:
            train, val = _split(table, args.val_frac, args.seed)
        if len(train) == 0 or len(val) == 0:
            raise ConfigError(f"task {task}: empty train or validation split")
        if max(ks) > len(train):
            raise ConfigError(f"k={max(ks)} exceeds the {len(train)} training rows for task {task}")
        index = _index(train, task, args.normalize)
        res = knn.sweep_k(index, val.embeddings, val.labels, ks)
        _write(Path(args.out_dir) / f"knn_sweep_{task}.csv", knn.sweep_csv(res))
        best = next(r for r in res.reports if r.k == res.best_k)
        for r in res.reports:
            for flag in r.flags:
                log.warning("task=%s k=%d flag=%s", task, r.k, flag)
        _result("knn-eval", task=task, best_k=res.best_k, accuracy=f"{best.accuracy:.6f}",
                f1=f"{best.f1:.6f}", n_train=len(train), n_val=len(val))
    return EXIT_OK


def cmd_infer(args) -> int:
    _need(args, "index", "queries", "manifest")
    idx_table = knn.read_embeddings(args.index)
    queries = knn.read_embeddings(args.queries)
    manifest = ingest.read_manifest(args.manifest)
    by_tile = {r.tile_id: r for r in manifest.records}
    locs = []
    for task in _tasks(args.task):
        train = idx_table.select(task).labeled()
        if len(train) == 0:
            raise ConfigError(f"index has no labelled rows for task {task}")
        if args.k > len(train):
            raise ConfigError(f"--k {args.k} exceeds the {len(train)} index rows for task {task}")
        index = _index(train, task, args.normalize)
        # unlabelled query files may carry a single task column; reuse it for every task
        q = queries.select(task if task in queries.tasks or not queries.tasks else queries.tasks[0])
        preds = knn.predict(index, q.embeddings, args.k) if len(q) else np.zeros(0, dtype=np.int64)
        groups, meta = defaultdict(list), {}
        for rid, p in zip(q.row_ids, preds):
            rec = by_tile.get(rid)
            if rec is None:
                raise IngestError("query rows missing from the manifest", [rid])
            loc = rec.location_id or rec.tile_id
            groups[loc].append(int(p))
            meta.setdefault(loc, rec)
        for loc, (score, label) in sorted(agg.fuse_predictions(groups).items()):
            rec = meta[loc]
            locs.append(agg.LocationLabel(loc, rec.lat, rec.lon, label, rec.country, task, score,
                                          len(groups[loc])))
    path = _write(Path(args.out_dir) / "locations.csv", agg.locations_csv(locs))
    _result("infer", locations=len(locs), positive=sum(l.label for l in locs), path=path)
    return EXIT_OK


def cmd_aggregate(args) -> int:
    _need(args, "locations", "population")
    locs = agg.read_locations(args.locations)
    cells = agg.read_population(args.population)
    tasks = sorted({l.task for l in locs}) or [""]
    estimates, coverage = [], []
    for task in tasks:
        res = agg.population_weighted_access([l for l in locs if l.task == task], cells, args.radius_km, task)
        estimates += res.estimates
        for d in res.diagnostics:
            log.warning("task=%s omitted %s", task, d)
        for c in sorted(set(res.excluded_cells)):
            coverage.append([task, c, res.excluded_cells[c], f"{res.excluded_population[c]:.0f}"])
    out = Path(args.out_dir)
    _write(out / "country_estimates.csv", agg.estimates_csv(estimates))
    _write(out / "coverage.csv", agg._csv(["task", "country", "excluded_cells", "excluded_population"],
                                          coverage))
    _result("aggregate", estimates=len(estimates), countries=len({e.country for e in estimates}))
    return EXIT_OK


def cmd_validate(args) -> int:
    out = Path(args.out_dir)
    if args.table_s2:
        paths = agg.write_table_s2_inputs(out / "table_s2_inputs")
        args.estimates = args.estimates or str(paths["estimates"])
        args.official = args.official or str(paths["official"])
        args.country_population = args.country_population or str(paths["population"])
    if args.estimates is None or args.official is None:
        raise ConfigError("validate needs --estimates and --official (or --table-s2)")
    _need(args, "estimates", "official", "country_population")
    estimates = agg.read_estimates(args.estimates)
    official = agg.read_official(args.official)
    population = agg.read_country_population(args.country_population) if args.country_population else {}
    if not population:
        for e in estimates:
            population.setdefault(e.country, e.population_total)
    reports = []
    for task in _tasks(args.task):
        ests = sorted((e for e in estimates if e.task == task), key=lambda e: e.country)
        countries = [e.country for e in ests]
        model = [100.0 * e.access_fraction for e in ests]
        offic = [official[c].pct(task) if c in official else None for c in countries]
        weights = [population.get(c) for c in countries]
        if any(w is None or not w > 0 for w in weights):
            weights = None
        rep = agg.r_squared(model, offic, weights, countries, task)
        reports.append(rep)
        _result("validate", task=task, n_pairs=rep.n_pairs, dropped=rep.n_dropped,
                r2=f"{rep.r_squared:.6f}", r2_weighted="" if rep.r_squared_weighted is None
                else f"{rep.r_squared_weighted:.6f}", pearson_r2=f"{rep.pearson_r2:.6f}",
                paper_r2=agg.PAPER_R2.get(task, ""))
    _write(out / "validation_report.csv", agg.report_csv(reports))
    _write(out / "scatter.csv", agg.scatter_export(reports, population))
    return EXIT_OK


def cmd_attn_viz(args) -> int:
    _need(args, "checkpoint", "tile")
    params, stats = _load_model(args)
    cfg = params.config
    layer = cfg.depth - 1 if args.layer is None else args.layer
    if not 0 <= layer < cfg.depth:
        raise ConfigError(f"--layer {layer} out of range [0, {cfg.depth - 1}]")
    if args.tile is not None:
        tile = ingest.load_tile(args.tile)
    else:
        raster = ingest.synth_tile(np.random.default_rng(args.seed), True, cfg.image_size, cfg.bands)
        tile = ingest.Tile("synthetic", raster, 0.0, 0.0, "2020-01-01", ingest.SOURCES[0], 0.0)
    image = _standardized([tile], cfg, stats)[0]
    overlay = vit.attention_maps(params, image, layer)
    out = Path(args.out_dir)
    for h, grid in enumerate(overlay.grids):
        vit.write_grid_csv(out / f"attn_layer{layer:02d}_head{h:02d}.csv", grid)
    _result("attn-viz", layer=layer, heads=len(overlay.grids), grid=f"{overlay.grids.shape[1]}x{overlay.grids.shape[2]}",
            cls_self_mass_max=f"{float(overlay.cls_self_mass.max()):.6f}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------

COMMANDS = {}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="seed for every random draw (default: %(default)s)")
    p.add_argument("--config", default=None, help="key=value file; explicit flags override it")
    p.add_argument("--preset", choices=sorted(vit.PRESETS), default="desk",
                   help="model preset (default: %(default)s)")
    p.add_argument("--out-dir", default="out", help="output directory (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geosdg", description="Water and sanitation access from image tiles.")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    def add(name, fn, help):
        p = sub.add_parser(name, help=help, description=help, formatter_class=fmt)
        _common(p)
        COMMANDS[name] = fn
        return p

    p = add("synth-data", cmd_synth_data, "write a procedural tile corpus, manifest and survey")
    p.add_argument("--n-tiles", type=int, default=400, help="number of tiles")
    p.add_argument("--balance", type=float, default=0.5, help="fraction of served tiles")
    p.add_argument("--label-noise", type=float, default=0.0, help="per-task label flip probability")
    p.add_argument("--size", type=int, default=32, help="tile edge in pixels")
    p.add_argument("--bands", type=int, default=3, help="spectral bands per tile")
    p.add_argument("--cloudy-fraction", type=float, default=0.1, help="share of tiles above the cloud threshold")

    p = add("pretrain", cmd_pretrain, "self-distillation pre-training on a tile manifest")
    p.add_argument("--manifest", required=True, help="tile manifest CSV")
    p.add_argument("--steps", type=int, default=300, help="total optimiser steps")
    p.add_argument("--batch-size", type=int, default=16, help="tiles per step (16-32 unless --no-strict)")
    p.add_argument("--lr", type=float, default=5e-4, help="peak learning rate")
    p.add_argument("--min-lr", type=float, default=1e-6, help="learning rate at the final step")
    p.add_argument("--weight-decay", type=float, default=0.04, help="initial weight decay")
    p.add_argument("--weight-decay-end", type=float, default=0.4, help="final weight decay")
    p.add_argument("--max-cloud", type=float, default=10.0, help="keep tiles with cloud cover <= this")
    p.add_argument("--save-every", type=int, default=0, help="intermediate checkpoint period (0 = off)")
    p.add_argument("--log-every", type=int, default=10, help="steps between log records")
    p.add_argument("--resume", default=None, help="training checkpoint to continue from")
    p.add_argument("--stop-at", type=int, default=None, help="stop after this many total steps")
    p.add_argument("--no-strict", action="store_true", help="allow batch sizes outside 16-32")

    p = add("embed", cmd_embed, "frozen-encoder embeddings for every tile in a manifest")
    p.add_argument("--manifest", required=True, help="tile manifest CSV")
    p.add_argument("--checkpoint", default=None, help="model checkpoint (random init when omitted)")
    p.add_argument("--survey", default=None, help="survey CSV; labels stay blank without it")
    p.add_argument("--task", choices=TASK_CHOICES, default="both", help="label task")
    p.add_argument("--pool", choices=("cls", "mean"), default="cls", help="CLS token or mean of patch tokens")
    p.add_argument("--max-cloud", type=float, default=10.0, help="keep tiles with cloud cover <= this")
    p.add_argument("--radius-m", type=float, default=1000.0, help="survey join radius")
    p.add_argument("--batch", type=int, default=64, help="tiles per forward pass")

    p = add("knn-eval", cmd_knn_eval, "k sweep on labelled embeddings")
    p.add_argument("--embeddings", required=True, help="embeddings CSV from embed")
    p.add_argument("--validation", default=None, help="pre-split validation embeddings")
    p.add_argument("--task", choices=TASK_CHOICES, default="piped_water", help="label task")
    p.add_argument("--ks", default=",".join(map(str, knn.PAPER_KS)), help="comma-separated k values")
    p.add_argument("--val-frac", type=float, default=0.2, help="seeded hold-out fraction")
    p.add_argument("--normalize", action="store_true", help="L2-normalise embeddings first")

    p = add("infer", cmd_infer, "k-NN labels for query tiles fused per location")
    p.add_argument("--index", required=True, help="labelled embeddings forming the index")
    p.add_argument("--queries", required=True, help="embeddings to classify")
    p.add_argument("--manifest", required=True, help="manifest giving query locations")
    p.add_argument("--task", choices=TASK_CHOICES, default="both", help="label task")
    p.add_argument("--k", type=int, default=5, help="neighbours per vote")
    p.add_argument("--normalize", action="store_true", help="L2-normalise embeddings first")

    p = add("aggregate", cmd_aggregate, "population-weighted national access estimates")
    p.add_argument("--locations", required=True, help="per-location labels from infer")
    p.add_argument("--population", required=True, help="CSV lat,lon,population,country")
    p.add_argument("--radius-km", type=float, default=5.0, help="cell-to-location assignment radius")

    p = add("validate", cmd_validate, "compare national estimates with official statistics")
    p.add_argument("--estimates", default=None, help="country estimates CSV")
    p.add_argument("--official", default=None, help="CSV country,year,piped_pct,sewage_pct")
    p.add_argument("--country-population", default=None, help="CSV country,population")
    p.add_argument("--table-s2", action="store_true", help="use the bundled model-vs-JMP country table")
    p.add_argument("--task", choices=TASK_CHOICES, default="both", help="label task")

    p = add("attn-viz", cmd_attn_viz, "CLS attention grids, one CSV per head")
    p.add_argument("--checkpoint", default=None, help="model checkpoint (random init when omitted)")
    p.add_argument("--tile", default=None, help="GTIL tile (synthetic tile when omitted)")
    p.add_argument("--layer", type=int, default=None, help="block index (default: last)")
    return parser


def read_config(path) -> dict[str, str]:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise ConfigError(f"--config {path}: {e}") from e
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"--config {path}: line {n} is not key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.lstrip("-").replace("-", "_")] = v
    return out


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    commands = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in commands), None)
    if known.config is None or command is None:
        return parser.parse_args(argv)
    # file values become subcommand defaults so explicit flags still win
    sub = commands[command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for k, v in read_config(known.config).items():
        a = actions.get(k)
        if a is None or k in ("config", "help"):
            raise ConfigError(f"--config: unknown key {k!r} for {command}")
        if isinstance(a, argparse._StoreTrueAction):
            defaults[k] = v.lower() in ("1", "true", "yes", "on")
        else:
            try:
                defaults[k] = a.type(v) if a.type else v
            except ValueError:
                raise ConfigError(f"--config: bad value for {k}: {v!r}") from None
            if a.choices and defaults[k] not in a.choices:
                raise ConfigError(f"--config: {k} must be one of {sorted(a.choices)}")
    sub.set_defaults(**defaults)
    for a in sub._actions:
        if a.dest in defaults:
            a.required = False
    return parser.parse_args(argv)


def _setup_logging(command: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(f"geosdg|%(levelname)s|{command}|%(message)s"))
    root = logging.getLogger("geosdg")
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO)
    root.propagate = False


def _classify(err: Exception) -> tuple[int, str]:
    if isinstance(err, (ConfigError, ShapeError)):
        return EXIT_CONFIG, "config"
    if isinstance(err, (IngestError, FormatError)):
        return EXIT_INGEST, "ingest"
    if isinstance(err, DegenerateFit):
        return EXIT_DEGENERATE, "degenerate_fit"
    return EXIT_NUMERICAL, "numerical"


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except ConfigError as e:
        print(f"geosdg|ERROR|config|{e}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:
        return int(e.code or 0)
    _setup_logging(args.command)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ShapeError, IngestError, FormatError, NumericalError, InvalidValue,
            DegenerateFit) as e:
        err = e
    code, kind = _classify(err)
    extra = ""
    if isinstance(err, NumericalError):
        extra = "".join(f" {k}={getattr(err, k)}" for k in ("step", "layer") if getattr(err, k) is not None)
    log.error("kind=%s%s %s", kind, extra, err)
    return code


if __name__ == "__main__":
    sys.exit(main())
