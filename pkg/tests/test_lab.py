import json

import numpy as np
import pytest

from p2inn import cli, lab, metrics, pdes, truth

TINY = """\
schema_version: 1
name: tiny
family: cdr
pde_type: reaction
range: {lo: 1, hi: 2, step: 1}
ic: gauss_pi_2
variants: [P2INN, PINN]
seeds: [0, 1]
model: {hidden_dim: 4, param_hidden_dim: 4, depth_p: 2, depth_c: 2, depth_g: 3}
train: {iterations: 3, batch_size: 20, log_every: 1}
dataset: {collocation: 30, initial: 8, boundary: 5, test: 12}
solver: {nx: 64, nt: 20}
eval: {seen: true, unseen: [1.5, 3], allow_extrapolation: true}
finetune: {modes: [All, Shift, SVD], epochs: 1, targets: [2]}
heatmap: {resolution: [4, 4], targets: [1.5]}
"""


def _write(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


@pytest.mark.parametrize("name", lab.preset_names())
def test_presets_validate(name):
    cfg = lab.load_config(name)
    assert cfg.name == name
    assert cfg.instances()


def test_acceptance_presets_exist():
    names = set(lab.preset_names())
    assert {"reaction_1to5_p2inn", "reaction_rho5_pinn", "reaction_1to10_interp", "convection_svd_finetune"} <= names


def test_unknown_family_is_rejected_with_line(tmp_path, capsys):
    out = tmp_path / "out"
    path = _write(tmp_path, TINY.replace("family: cdr", "family: wave"))
    assert cli.main(["generate", "--config", path, "--out", str(out)]) == 2
    err = capsys.readouterr().err
    assert "c.yaml:3:" in err and "wave" in err
    assert not out.exists()


def test_unknown_key_reports_line():
    with pytest.raises(lab.ConfigError) as exc:
        lab.parse_config(TINY.replace("train: {", "train: {lr: 0.1, "), "x.yaml")
    assert "x.yaml:10:" in str(exc.value) and "lr" in str(exc.value)
    with pytest.raises(lab.ConfigError) as exc:
        lab.parse_config(TINY + "colour: blue\n", "x.yaml")
    assert "x.yaml:16:" in str(exc.value)


def test_extrapolation_needs_flag():
    with pytest.raises(lab.ConfigError):
        lab.parse_config(TINY.replace("allow_extrapolation: true", "allow_extrapolation: false"))
    cfg = lab.parse_config(TINY.replace(", 3]", "]").replace("allow_extrapolation: true", "allow_extrapolation: false"))
    assert [cfg.split_of(i) for i in cfg.unseen_instances()] == ["interp"]


def test_schema_version_and_required():
    with pytest.raises(lab.ConfigError):
        lab.parse_config(TINY.replace("schema_version: 1", "schema_version: 2"))
    with pytest.raises(lab.ConfigError):
        lab.parse_config(TINY.replace("variants: [P2INN, PINN]\n", ""))


def test_run_dir_hash_ignores_out():
    a = lab.parse_config(TINY)
    b = lab.parse_config(TINY + "out: elsewhere\n")
    c = lab.parse_config(TINY.replace("seeds: [0, 1]", "seeds: [0]"))
    assert a.digest == b.digest != c.digest


def test_eval_before_train_exit_code(tmp_path):
    path = _write(tmp_path, TINY)
    assert cli.main(["eval", "--config", path, "--out", str(tmp_path / "o")]) == 4


def _snapshot(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg_path = root / "tiny.yaml"
    cfg_path.write_text(TINY)
    out = root / "out"
    assert cli.main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
    return lab.load_config(str(cfg_path)), out


def test_end_to_end_layout(tiny_run):
    cfg, out = tiny_run
    run = cfg.run_dir(str(out))
    assert json.loads((run / "config.json").read_text())["name"] == "tiny"
    assert len(list((run / "data").glob("*.txt"))) == 4  # two seen, two unseen
    seen, agg = metrics.MetricsReport.read_csv(run / "P2INN" / "metrics_seen.csv")
    assert len(seen.rows) == 2 * 2 and set(agg) == {"mean", "std"}
    assert len(metrics.MetricsReport.read_csv(run / "P2INN" / "metrics_interp.csv")[0].rows) == 2
    assert len(metrics.MetricsReport.read_csv(run / "P2INN" / "metrics_extrap.csv")[0].rows) == 2
    assert len(metrics.MetricsReport.read_csv(run / "PINN" / "metrics_seen.csv")[0].rows) == 4
    assert not (run / "PINN" / "metrics_interp.csv").exists()
    for mode in ("pretrained", "All", "Shift", "SVD"):
        assert len(metrics.MetricsReport.read_csv(run / "P2INN" / f"finetune_{mode}.csv")[0].rows) == 2
    xs, ts, vals = lab.read_heatmap(run / "P2INN" / "heatmap_rho=1.5.csv")
    assert vals.shape == (4, 4)
    np.testing.assert_allclose(xs, np.arange(4) * np.pi / 2)
    assert (run / "heatmaps" / "exact_rho=1.5.csv").exists()


def test_end_to_end_is_idempotent(tiny_run):
    cfg, out = tiny_run
    before = _snapshot(out)
    cfg_path = out.parent / "tiny.yaml"
    assert cli.main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert _snapshot(out) == before


def test_workers_give_identical_models(tiny_run, tmp_path):
    cfg, out = tiny_run
    lab.train_all(cfg, str(tmp_path), workers=2)
    for p in (tmp_path / cfg.run_dir(str(tmp_path)).name).rglob("*.ckpt"):
        q = cfg.run_dir(str(out)) / p.relative_to(cfg.run_dir(str(tmp_path)))
        assert p.read_bytes() == q.read_bytes()


def test_model_heatmap_matches_direct_prediction(tiny_run):
    cfg, out = tiny_run
    inst = cfg.make([1.5])
    model = lab.load_model(lab.Job(cfg, "P2INN", 0, str(out)))
    xs, ts, vals = lab.heatmap_values(model, inst, (4, 4))
    X, T = np.meshgrid(xs, ts)
    direct = model.predict(np.c_[X.ravel(), T.ravel()], inst).reshape(4, 4)
    np.testing.assert_array_equal(vals, direct)
    exact = lab.heatmap_values(None, inst, (4, 4), truth.solve_cdr(inst, nx=64, nt=20))[2]
    rms = metrics.l2_errors(vals, exact)[0]
    assert rms == pytest.approx(np.sqrt(np.mean((vals - exact) ** 2)), rel=1e-9)


def test_exact_heatmap_at_solver_resolution():
    inst = pdes.make_instance("convection", [5], "one_plus_sin")
    g = truth.solve_cdr(inst)
    xs, ts, vals = lab.heatmap_values(None, inst, (256, 101), g)
    np.testing.assert_array_equal(vals, g.values)
    np.testing.assert_array_equal(xs, g.x)
    np.testing.assert_allclose(ts, g.t, atol=1e-15)
    assert np.abs(vals - (1 + np.sin(xs[None] - 5 * ts[:, None]))).max() < 1e-10


def _report(path, rel):
    metrics.MetricsReport([metrics.InstanceMetrics("reaction", "1~5", "rho=1", 0, rel / 2, rel, rel, 0.0)]).write_csv(path)
    return str(path)


def test_compare_runs_and_cli(tmp_path, capsys):
    b, o = _report(tmp_path / "b.csv", 0.5825), _report(tmp_path / "o.csv", 0.0041)
    fwd = {r.metric: r.percent for r in lab.compare_runs(b, o)}
    back = {r.metric: r.percent for r in lab.compare_runs(o, b)}
    assert f"{fwd['rel']:.2f}" == "99.30"
    assert back["rel"] < 0
    assert lab.compare_runs(b, b)[1].percent == 0
    assert cli.main(["compare", b, o, "--out", str(tmp_path / "t.txt")]) == 0
    text = capsys.readouterr().out
    assert "reaction,rel,0.5825,0.0041,99.30" in text
    assert (tmp_path / "t.txt").read_text().strip() == text.strip()


def test_cli_presets_and_heatmap(tmp_path, capsys):
    assert cli.main(["presets"]) == 0
    assert "reaction_1to5_p2inn" in capsys.readouterr().out
    path = _write(tmp_path, TINY)
    assert cli.main(["heatmap", "--config", path, "--out", str(tmp_path / "o"), "--instance", "2",
                     "--resolution", "8", "3"]) == 0
    produced = capsys.readouterr().out.split()
    assert len(produced) == 1 and lab.read_heatmap(produced[0])[2].shape == (3, 8)
