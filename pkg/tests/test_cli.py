import numpy as np
import pytest

from moldiff.cli import main
from moldiff.harness import (RunConfig, load_dataset, methane_like,
                             jittered_copies, save_regressor, water_like,
                             write_xyz, toy_dataset)

DESK_CONFIG = """
T = 10
hidden_dim = 8
n_layers = 1
rbf_count = 8
time_embed_dim = 8
zv_dim = 4
batch_size = 2
epochs = 1
checkpoint_interval = 2
seed = 3
"""


@pytest.fixture()
def tiny_data(tmp_path):
    rng = np.random.default_rng(0)
    molecules = jittered_copies(methane_like(), 4, 0.03, rng)
    path = tmp_path / "data.xyz"
    write_xyz(str(path), molecules)
    return path


@pytest.fixture()
def trained(tmp_path, tiny_data):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(DESK_CONFIG)
    out = tmp_path / "run"
    code = main(["train", "--config", str(cfg_path), "--data", str(tiny_data),
                 "--out", str(out)])
    assert code == 0
    return out / "checkpoint.ckpt"


def test_usage_errors_exit_1(capsys):
    assert main(["frobnicate"]) == 1
    assert main(["sample", "--unknown-flag"]) == 1
    assert main([]) == 1


def test_runtime_errors_exit_2(tmp_path):
    assert main(["eval", "--samples", str(tmp_path / "missing.xyz"),
                 "--train", str(tmp_path / "missing.xyz"),
                 "--report", str(tmp_path / "r.csv")]) == 2
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("T = 0\n")
    assert main(["train", "--config", str(bad_cfg), "--data", "x", "--out",
                 str(tmp_path)]) == 2


def test_train_writes_checkpoint_and_metrics(trained, tmp_path):
    assert trained.exists()
    metrics = trained.parent / "metrics.csv"
    lines = metrics.read_text().strip().splitlines()
    assert lines[0] == "step,t_mean,feature_loss,coord_loss,vn_loss,total"
    assert len(lines) == 3   # 4 molecules, batch 2, 1 epoch


def test_sample_deterministic_outputs(trained, tmp_path):
    out1 = tmp_path / "s1.xyz"
    out2 = tmp_path / "s2.xyz"
    for out in (out1, out2):
        code = main(["sample", "--ckpt", str(trained), "--num", "3",
                     "--out", str(out), "--seed", "11"])
        assert code == 0
    assert out1.read_bytes() == out2.read_bytes()
    ds = load_dataset(str(out1))
    assert len(ds) == 3
    assert all(m.n == 5 for m in ds.molecules)   # histogram is a point mass


def test_sample_fixed_size_and_trajectory(trained, tmp_path):
    out = tmp_path / "s.xyz"
    code = main(["sample", "--ckpt", str(trained), "--num", "1", "--out",
                 str(out), "--size", "3", "--dump-trajectory", "5"])
    assert code == 0
    assert load_dataset(str(out)).molecules[0].n == 3
    traj = out.parent / (out.name + ".traj")
    blocks = load_dataset(str(traj))
    assert len(blocks) >= 3


def test_eval_counting_example(tmp_path):
    methane = methane_like()
    permuted = type(methane)(methane.atom_features[[1, 0, 2, 3, 4]],
                             methane.coords[[1, 0, 2, 3, 4]], methane.elements)
    samples = tmp_path / "samples.xyz"
    write_xyz(str(samples), [methane, permuted, water_like()])
    train_file = tmp_path / "train.xyz"
    write_xyz(str(train_file), [water_like()])
    report = tmp_path / "report.csv"
    code = main(["eval", "--samples", str(samples), "--train", str(train_file),
                 "--report", str(report)])
    assert code == 0
    lines = report.read_text().strip().splitlines()
    assert lines[0] == "index,valid,stable,key"
    rows = [line.split(",") for line in lines[1:4]]
    assert all(r[1] == "1" and r[2] == "1" for r in rows)
    assert rows[0][3] == rows[1][3]          # isomorphic pair shares a key
    assert rows[0][3] != rows[2][3]
    summary = lines[4]
    assert "validity=100.0000" in summary
    assert "uniqueness=66.6667" in summary
    # water is in the training set: only methane is novel
    assert "novelty=33.3333" in summary


def test_diffuse_moments(tmp_path):
    ds = toy_dataset(count=300)
    data = tmp_path / "toy.xyz"
    write_xyz(str(data), ds.molecules)
    cfg = tmp_path / "d.cfg"
    cfg.write_text("T = 200\nbeta_min = 0.001\nbeta_max = 0.05\n")
    out = tmp_path / "noised.xyz"
    code = main(["diffuse", "--data", str(data), "--t", "200", "--out",
                 str(out), "--config", str(cfg)])
    assert code == 0
    noised = load_dataset(str(out))
    coords = np.concatenate([m.coords for m in noised.molecules])
    # at t = T the coordinates are nearly an isotropic zero-COM Gaussian:
    # per-coordinate variance (1 - 1/n)(1 - ab_T) + ab_T * E[x0^2]
    import moldiff.harness as h
    sched = h.parse_config(cfg.read_text()).schedule()
    ab = sched.alpha_bar[-1]
    x0_sq = np.mean(np.concatenate([m.coords for m in ds.molecules]) ** 2)
    predicted = (1 - 1 / 5) * (1 - ab) + ab * x0_sq
    assert abs(coords.mean()) < 4 * np.sqrt(predicted / coords.size)
    assert np.var(coords) == pytest.approx(predicted, rel=0.1)
    # out-of-range step is a usage error
    assert main(["diffuse", "--data", str(data), "--t", "999", "--out",
                 str(out), "--config", str(cfg)]) == 1


def test_cond_eval_reports_mae(tmp_path):
    from moldiff.chem_eval import RegressorParams
    from moldiff.score_net import init_dense, init_encoder
    from moldiff.harness import chain_family, rng_stream

    run_cfg = RunConfig(T=10, hidden_dim=8, n_layers=1, rbf_count=8,
                        time_embed_dim=8, zv_dim=4)
    cfg = run_cfg.net_config()
    rng = rng_stream(1, "init")
    reg = RegressorParams(encoder=init_encoder(rng, cfg, with_time=False,
                                               with_zv=False),
                          head=init_dense(rng, cfg.hidden_dim, 1),
                          property_name="rgyr", target_mean=2.0, target_std=0.5)
    reg_path = tmp_path / "reg.ckpt"
    save_regressor(reg, run_cfg, str(reg_path))

    ds = chain_family(20, np.random.default_rng(2))
    samples = tmp_path / "gen.xyz"
    write_xyz(str(samples), ds.molecules, properties=ds.properties)
    data = tmp_path / "family.xyz"
    write_xyz(str(data), ds.molecules, properties=ds.properties)
    report = tmp_path / "cond.csv"
    code = main(["cond-eval", "--samples", str(samples), "--regressor",
                 str(reg_path), "--report", str(report), "--data", str(data)])
    assert code == 0
    lines = report.read_text().strip().splitlines()
    assert lines[0].split(",") == ["model_mae", "naive_mae", "natoms_mae",
                                   "lower_bound_mae"]
    values = [float(v) for v in lines[1].split(",")]
    assert all(np.isfinite(values))
