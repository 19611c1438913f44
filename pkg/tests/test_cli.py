import csv

import numpy as np
import pytest

from geosdg import cli, dino, ingest, knn, vit


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth-data", "--n-tiles", 48, "--out-dir", root / "data") == 0
    assert run("pretrain", "--manifest", root / "data/manifest.csv", "--steps", 4, "--out-dir", root / "run") == 0
    return root


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_help_lists_flags_with_defaults(capsys):
    parser = cli.build_parser()
    sub = parser._subparsers._group_actions[0].choices
    assert set(sub) == {"synth-data", "pretrain", "embed", "knn-eval", "infer", "aggregate", "validate", "attn-viz"}
    for name, p in sub.items():
        text = p.format_help()
        for action in p._actions:
            if action.dest == "help":
                continue
            assert action.option_strings[0] in text
            if not action.required and action.default is not None and action.default is not False:
                assert f"(default: {action.default})" in " ".join(text.split())
    pre = " ".join(sub["pretrain"].format_help().split())
    assert "--lr LR" in pre and "(default: 0.0005)" in pre and "(default: 16)" in pre


def test_missing_flag_and_missing_file(capsys, tmp_path):
    assert run("pretrain", "--out-dir", tmp_path) == 2
    assert "--manifest" in capsys.readouterr().err
    assert run("pretrain", "--manifest", tmp_path / "none.csv", "--out-dir", tmp_path) == 3
    err = capsys.readouterr().err
    assert err.startswith("geosdg|ERROR|pretrain|kind=ingest") and "--manifest" in err


def test_pretrain_outputs(workspace, tmp_path):
    m = workspace / "data/manifest.csv"
    assert run("pretrain", "--manifest", m, "--steps", 10, "--batch-size", 16, "--out-dir", tmp_path) == 0
    assert (tmp_path / "checkpoint.gsdg").exists()
    assert len(dino.read_loss_log(tmp_path / "loss_log.csv")) == 10
    assert run("pretrain", "--manifest", m, "--steps", 2, "--batch-size", 8, "--out-dir", tmp_path / "b") == 2


def test_config_file_and_flag_precedence(workspace, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# synthetic\nn-tiles = 12\nseed = 5\nout_dir = {tmp_path / 'from_file'}\n")
    assert run("synth-data", "--config", cfg, "--n-tiles", 10) == 0
    assert "tiles=10" in capsys.readouterr().out
    assert len(ingest.read_manifest(tmp_path / "from_file/manifest.csv")) == 10
    cfg.write_text("bogus = 1\n")
    assert run("synth-data", "--config", cfg) == 2
    cfg.write_text(f"manifest = {workspace / 'data/manifest.csv'}\nsteps = 1\n")
    assert run("pretrain", "--config", cfg, "--out-dir", tmp_path / "p") == 0


def test_numerical_failure_exit_code(workspace, tmp_path, capsys):
    m = workspace / "data/manifest.csv"
    tcfg = dino.TrainConfig(steps=3, seed=0)
    state = dino.DinoState.create(vit.preset("desk"), 0)
    state.student["blocks.1.mlp.fc1.weight"][:] = np.inf
    _, _, stats = dino.prepare_tiles(ingest.read_manifest(m), state.config)
    dino.save_state(tmp_path / "bad.gsdg", state, dino._meta(tcfg, stats, 1))
    assert run("pretrain", "--manifest", m, "--steps", 3, "--resume", tmp_path / "bad.gsdg", "--out-dir", tmp_path) == 4
    assert "kind=numerical step=0" in capsys.readouterr().err


def test_embed(workspace, tmp_path):
    m = workspace / "data/manifest.csv"
    ck = workspace / "run/checkpoint.gsdg"
    assert run("embed", "--manifest", m, "--checkpoint", ck, "--task", "piped_water", "--out-dir", tmp_path) == 0
    table = knn.read_embeddings(tmp_path / "embeddings.csv")
    kept = ingest.filter_cloud(ingest.read_manifest(m))
    assert table.row_ids == sorted(r.tile_id for r in kept)
    assert all(lab is None for lab in table.labels) and table.embeddings.shape[1] == 64
    assert all(r[3] == "64" for r in _rows(tmp_path / "embeddings.csv")[1:])

    empty = tmp_path / "empty.csv"
    empty.write_text(",".join(ingest.MANIFEST_HEADER) + "\n")
    assert run("embed", "--manifest", empty, "--checkpoint", ck, "--out-dir", tmp_path / "e") == 0
    assert (tmp_path / "e/embeddings.csv").read_text().count("\n") == 1


def test_embed_unreadable_tiles(workspace, tmp_path, capsys):
    lines = (workspace / "data/manifest.csv").read_text().splitlines()
    broken = tmp_path / "m.csv"
    broken.write_text("\n".join(lines[:4]) + "\n")
    assert run("embed", "--manifest", broken, "--out-dir", tmp_path) == 3
    assert capsys.readouterr().err.count("tiles/t0000") == 3


def test_knn_eval_and_infer_chain(workspace, tmp_path, capsys):
    ck = workspace / "run/checkpoint.gsdg"
    m, s = workspace / "data/manifest.csv", workspace / "data/survey.csv"
    assert run("embed", "--manifest", m, "--checkpoint", ck, "--survey", s, "--out-dir", tmp_path) == 0
    emb = tmp_path / "embeddings.csv"
    assert run("knn-eval", "--embeddings", emb, "--ks", "1,3,5", "--out-dir", tmp_path) == 0
    out = capsys.readouterr().out
    assert "best_k=" in out
    assert len(_rows(tmp_path / "knn_sweep_piped_water.csv")) == 4
    assert run("knn-eval", "--embeddings", emb, "--ks", "5,500", "--out-dir", tmp_path) == 2

    # an all-positive index must give every country full access
    table = knn.read_embeddings(emb)
    table.labels = [1 for _ in table.labels]
    (tmp_path / "pos.csv").write_text(knn.embeddings_csv(table))
    assert run("infer", "--index", tmp_path / "pos.csv", "--queries", emb, "--manifest", m,
               "--task", "piped_water", "--out-dir", tmp_path) == 0
    pop = tmp_path / "pop.csv"
    recs = ingest.read_manifest(m).records
    pop.write_text("lat,lon,population,country\n" + "".join(f"{r.lat},{r.lon},100,{r.country}\n" for r in recs))
    assert run("aggregate", "--locations", tmp_path / "locations.csv", "--population", pop, "--out-dir", tmp_path) == 0
    est = _rows(tmp_path / "country_estimates.csv")
    assert len(est) > 1 and all(r[2] == "100.00" for r in est[1:])


def test_validate_table_s2(tmp_path):
    assert run("validate", "--table-s2", "--out-dir", tmp_path) == 0
    scatter = _rows(tmp_path / "scatter.csv")
    assert scatter[0] == ["country", "task", "model_pct", "official_pct", "population"]
    assert sum(r[1] == "piped" for r in scatter[1:]) == 51
    assert ["DZA", "piped", "78.76", "71.39", "44903000"] in scatter
    report = _rows(tmp_path / "validation_report.csv")
    assert "slope" in report[0] and "intercept" in report[0] and report[1][-1] == "0.95"


def test_validate_degenerate_and_missing(tmp_path):
    est = tmp_path / "est.csv"
    est.write_text("country,task,access_pct,population_covered,population_total,n_locations\n"
                   "AAA,piped_water,50.00,1,1,1\nBBB,piped_water,50.00,1,1,1\n")
    off = tmp_path / "off.csv"
    off.write_text("country,year,piped_pct,sewage_pct\nAAA,2022,40,\nBBB,2022,60,\n")
    assert run("validate", "--estimates", est, "--official", off, "--task", "piped_water", "--out-dir", tmp_path) == 5
    assert run("validate", "--estimates", tmp_path / "nope.csv", "--official", off, "--out-dir", tmp_path) == 3
    assert run("aggregate", "--locations", tmp_path / "nope.csv", "--population", off, "--out-dir", tmp_path) == 3


def test_attn_viz(workspace, tmp_path):
    ck = workspace / "run/checkpoint.gsdg"
    assert run("attn-viz", "--checkpoint", ck, "--tile", workspace / "data/tiles/t00001.gtil",
               "--layer", 2, "--out-dir", tmp_path) == 0
    files = sorted(tmp_path.glob("attn_layer02_head*.csv"))
    assert len(files) == 4
    for f in files:
        assert vit.read_grid_csv(f, np.float64).sum() <= 1 + 1e-5
    assert run("attn-viz", "--checkpoint", ck, "--layer", 4, "--out-dir", tmp_path) == 2

    params = vit.load_params(ck)
    params.tensors["blocks.3.attn.q.weight"][:] = 0
    params.tensors["blocks.3.attn.q.bias"][:] = 0
    vit.save_params(tmp_path / "zq.gsdg", params)
    assert run("attn-viz", "--checkpoint", tmp_path / "zq.gsdg", "--out-dir", tmp_path / "zq") == 0
    for f in sorted((tmp_path / "zq").glob("*.csv")):
        assert np.allclose(vit.read_grid_csv(f), 1 / 17, atol=1e-7)


def test_attn_viz_base_preset_without_checkpoint(tmp_path):
    assert run("attn-viz", "--preset", "base", "--layer", 0, "--out-dir", tmp_path) == 0
    assert len(list(tmp_path.glob("*.csv"))) == 12
