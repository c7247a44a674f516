"""Command-line surface: flags, config files, output stamping, exit codes."""

import numpy as np
import pytest

from xmal import autodiff as ad
from xmal.cli import main
from xmal.data import EmbeddingItem, EmbeddingSet, load_dataset, save_embeddings


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def gen(tmp_path, capsys, name="d.xmal", **extra):
    path = str(tmp_path / name)
    args = [
        "gen-data", "--pairs", "24", "--K", "4", "--D", "16", "--N", "5", "--M", "8",
        "--sigma", "0.1", "--seed", "7", "--out", path,
    ]
    for key, val in extra.items():
        args.extend([key, val])
    code, out, err = run(capsys, *args)
    assert code == 0, err
    return path


def test_gen_data_writes_file_and_manifest(tmp_path, capsys):
    path = gen(tmp_path, capsys)
    ds = load_dataset(path)
    assert ds.config.pairs == 24
    assert ds.config.factor_count == 4
    assert ds.config.embed_dim == 16
    manifest = dict(
        line.split("=", 1) for line in open(path + ".manifest").read().splitlines()
    )
    assert manifest["K"] == "4" and manifest["seed"] == "7"
    assert len(manifest["config_hash"]) == 12


def test_gen_data_divisibility_error_nonzero_exit(tmp_path, capsys):
    code, out, err = run(
        capsys, "gen-data", "--pairs", "8", "--K", "3", "--D", "16",
        "--out", str(tmp_path / "bad.xmal"),
    )
    assert code != 0
    assert "divisible" in err


def test_gen_data_byte_identical_reruns(tmp_path, capsys):
    p1 = gen(tmp_path, capsys, name="a.xmal")
    p2 = gen(tmp_path, capsys, name="b.xmal")
    assert open(p1, "rb").read() == open(p2, "rb").read()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    data = str(tmp / "d.xmal")
    ckpt = str(tmp / "ck.xckp")
    assert main([
        "gen-data", "--pairs", "24", "--K", "4", "--D", "16", "--N", "5", "--M", "8",
        "--sigma", "0.1", "--seed", "7", "--out", data,
    ]) == 0
    assert main([
        "train", "--data", data, "--out", ckpt, "--epochs", "2", "--batch-size", "8",
        "--seed", "3",
    ]) == 0
    return data, ckpt


def test_train_writes_checkpoint_and_log(trained):
    data, ckpt = trained
    blob = open(ckpt, "rb").read()
    assert blob[:4] == b"XCKP"
    log = open(ckpt + ".log").read().splitlines()
    assert log[0].startswith("config_hash=")
    assert log[1] == "seed=3"
    steps = [line for line in log if line.startswith("step=")]
    assert len(steps) == 6  # 24 // 8 * 2 epochs
    assert all("loss=" in line for line in steps)


def test_train_zero_weights_logs_zero_components(tmp_path, capsys):
    data = gen(tmp_path, capsys)
    ckpt = str(tmp_path / "dp.xckp")
    code, out, err = run(
        capsys, "train", "--data", data, "--out", ckpt, "--epochs", "1",
        "--batch-size", "8", "--alpha", "0", "--beta", "0", "--mode", "DP",
    )
    assert code == 0, err
    for line in open(ckpt + ".log").read().splitlines():
        if line.startswith("step="):
            assert "loss_d=0.0" in line and "loss_a=0.0" in line


def test_train_missing_dataset_nonzero_exit(tmp_path, capsys):
    code, out, err = run(
        capsys, "train", "--data", str(tmp_path / "none.xmal"), "--out", str(tmp_path / "x"),
    )
    assert code != 0


def test_eval_mode_direction_cardinality(trained, capsys):
    data, ckpt = trained
    code, out, err = run(
        capsys, "eval", "--ckpt", ckpt, "--data", data,
        "--modes", "DP,THA,DCR,THA+DCR", "--k", "1,5,10",
    )
    assert code == 0, err
    lines = [l for l in out.splitlines() if " size=" in l]
    assert len(lines) == 8  # 4 modes x 2 directions
    assert all("r@1=" in l and "r@10=" in l for l in lines)


def test_eval_missing_checkpoint_fails(tmp_path, capsys, trained):
    data, _ = trained
    code, out, err = run(capsys, "eval", "--ckpt", str(tmp_path / "no.xckp"), "--data", data)
    assert code != 0


def test_eval_unknown_mode_rejected(trained, capsys):
    data, ckpt = trained
    code, out, err = run(capsys, "eval", "--ckpt", ckpt, "--data", data, "--modes", "WAT")
    assert code != 0
    assert "mode" in err.lower()


def test_eval_reports_are_reproducible(trained, tmp_path, capsys):
    data, ckpt = trained
    out1 = str(tmp_path / "r1")
    out2 = str(tmp_path / "r2")
    for out_path in (out1, out2):
        code, _, err = run(
            capsys, "eval", "--ckpt", ckpt, "--data", data, "--modes", "DP,THA+DCR",
            "--k", "1,5", "--out", out_path,
        )
        assert code == 0, err
    assert open(out1 + ".txt").read() == open(out2 + ".txt").read()
    assert open(out1 + ".xrpt", "rb").read() == open(out2 + ".xrpt", "rb").read()


def test_train_resume_reproduces_log(tmp_path, capsys):
    data = gen(tmp_path, capsys, name="resume.xmal")
    full = str(tmp_path / "full.xckp")
    half = str(tmp_path / "half.xckp")
    common = ["--data", data, "--batch-size", "8", "--seed", "11"]
    # one-shot 4 epochs (12 steps), snapshot every 6 steps
    code, _, err = run(
        capsys, "train", *common, "--out", full, "--epochs", "4",
        "--checkpoint-interval", "6",
    )
    assert code == 0, err
    code, _, err = run(capsys, "train", "--data", data, "--out", half,
                       "--resume", full + ".step000006")
    assert code == 0, err
    one_shot = [l for l in open(full + ".log").read().splitlines() if l.startswith("step=")]
    resumed = [l for l in open(half + ".log").read().splitlines() if l.startswith("step=")]
    assert resumed == one_shot[6:]
    # final checkpoints agree byte for byte
    assert open(full, "rb").read() == open(half, "rb").read()


def test_sim_breakdown_consistency(trained, capsys):
    data, ckpt = trained
    code, out, err = run(
        capsys, "sim", "--ckpt", ckpt, "--data", data, "--item-a", "1", "--item-b", "2",
    )
    assert code == 0, err
    values = dict(
        line.split("=", 1) for line in out.splitlines() if "=" in line and " " not in line.split("=")[0]
    )
    dp = float(values["DP"])
    tha = float(values["THA"])
    dcr = float(values["DCR"])
    levels = sum(float(values[f"THA.level{l}"]) for l in (1, 2, 3))
    assert abs(levels - tha) < 1e-10
    factor_sum = sum(
        float(values[f"DCR.factor{i}.confidence"]) * float(values[f"DCR.factor{i}.cosine"])
        for i in range(4)
    )
    assert abs(factor_sum - dcr) < 1e-10
    assert abs(float(values["THA+DP"]) - (tha + dp)) < 1e-10
    assert abs(float(values["THA+DCR"]) - (tha + dcr)) < 1e-10


def test_sim_bad_item_index(trained, capsys):
    data, ckpt = trained
    code, out, err = run(
        capsys, "sim", "--ckpt", ckpt, "--data", data, "--item-a", "99", "--item-b", "0",
    )
    assert code != 0
    assert "out of range" in err


def test_sim_self_pair_identical_embeddings_dp_is_one(trained, tmp_path, capsys):
    _, ckpt = trained
    rng = np.random.default_rng(4)
    dim = 16
    shared_levels = [rng.normal(size=(c, dim)) for c in (4, 2, 1)]
    shared_global = rng.normal(size=dim)
    item = EmbeddingItem(
        audio_levels=[a.copy() for a in shared_levels],
        audio_global=shared_global.copy(),
        text_levels=[a.copy() for a in shared_levels],
        text_global=shared_global.copy(),
    )
    es = EmbeddingSet(dim=dim, audio_counts=(4, 2, 1), text_counts=(4, 2, 1), items=[item])
    epath = str(tmp_path / "same.xemb")
    save_embeddings(es, epath)
    code, out, err = run(
        capsys, "sim", "--ckpt", ckpt, "--embeddings", epath, "--item-a", "0", "--item-b", "0",
    )
    assert code == 0, err
    dp = float([l for l in out.splitlines() if l.startswith("DP=")][0].split("=")[1])
    assert abs(dp - 1.0) < 1e-12


def test_sim_matches_diagnostics_confidences(trained, capsys):
    from xmal.cli import _restore_model
    from xmal.evaluation import dcr_diagnostics

    data, ckpt = trained
    ds = load_dataset(data)
    model, _ = _restore_model(ckpt, ds)
    code, out, err = run(
        capsys, "sim", "--ckpt", ckpt, "--data", data, "--item-a", "0", "--item-b", "0",
    )
    assert code == 0, err
    printed = {}
    for line in out.splitlines():
        if line.startswith("DCR.factor") and ".confidence=" in line:
            idx = int(line.split(".")[1][len("factor"):])
            printed[idx] = float(line.split("=")[1])
    # diagnostics over a batch containing item 0 first: its per-item row of
    # matched-pair confidences must equal the sim breakdown
    diag = dcr_diagnostics(model, ds.items[:2])
    for i in range(4):
        assert abs(printed[i] - diag.confidence_items[0, i]) < 1e-10


def test_export_embeddings_round_trip(trained, tmp_path, capsys):
    data, ckpt = trained
    epath = str(tmp_path / "enc.xemb")
    code, out, err = run(
        capsys, "export-embeddings", "--ckpt", ckpt, "--data", data, "--out", epath,
    )
    assert code == 0, err
    code, out, err = run(
        capsys, "eval", "--ckpt", ckpt, "--data", data, "--modes", "DP", "--k", "1",
    )
    direct = [l for l in out.splitlines() if " size=" in l]
    code, out, err = run(
        capsys, "eval", "--ckpt", ckpt, "--embeddings", epath, "--modes", "DP", "--k", "1",
    )
    via_file = [l for l in out.splitlines() if " size=" in l]
    strip = lambda ls: [l.split(" config_hash=")[0] for l in ls]
    assert strip(direct) == strip(via_file)


def test_config_file_with_flag_override(tmp_path, capsys):
    cfg_path = str(tmp_path / "run.cfg")
    out_path = str(tmp_path / "cfg.xmal")
    with open(cfg_path, "w") as f:
        f.write("[data]\npairs=8\nK=4\nD=16\nseed=5\n")
    code, _, err = run(capsys, "gen-data", "--config", cfg_path, "--out", out_path,
                       "--seed", "9")
    assert code == 0, err
    ds = load_dataset(out_path)
    assert ds.config.pairs == 8
    assert ds.config.seed == 9  # flag wins over file


def test_config_file_unknown_key_rejected(tmp_path, capsys):
    cfg_path = str(tmp_path / "bad.cfg")
    with open(cfg_path, "w") as f:
        f.write("[data]\npairs=8\nKK=4\n")
    code, out, err = run(capsys, "gen-data", "--config", cfg_path,
                         "--out", str(tmp_path / "x.xmal"))
    assert code != 0
    assert "KK" in err


def test_config_file_unknown_section_rejected(tmp_path, capsys):
    cfg_path = str(tmp_path / "bad2.cfg")
    with open(cfg_path, "w") as f:
        f.write("[dataz]\npairs=8\n")
    code, out, err = run(capsys, "gen-data", "--config", cfg_path,
                         "--out", str(tmp_path / "x.xmal"))
    assert code != 0
    assert "dataz" in err


def test_grad_check_passes_and_prints_worst_errors(capsys):
    code, out, err = run(capsys, "grad-check", "--seeds", "1")
    assert code == 0, err
    assert "h=1e-05" in out
    assert "status=PASS" in out
    assert "all" in out and "passed" in out


def test_grad_check_flag_overrides_echoed(capsys):
    code, out, err = run(capsys, "grad-check", "--seeds", "1", "--h", "2e-05", "--tol", "1e-4")
    assert code == 0, err
    assert "h=2e-05" in out and "tol=0.0001" in out


def test_grad_check_fails_on_injected_gradient_bug(capsys):
    ad.GRAD_OVERRIDES["hinge"] = 1.02
    try:
        code, out, err = run(capsys, "verify", "--seeds", "1")
    finally:
        ad.GRAD_OVERRIDES.clear()
    assert code != 0
    assert "hinge" in err  # the failing op is named
    assert "FAIL" in out


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point
def test_train_divergence_exit_names_step(tmp_path, capsys):
    data = gen(tmp_path, capsys, name="div.xmal")
    code, out, err = run(
        capsys, "train", "--data", data, "--out", str(tmp_path / "d.xckp"),
        "--epochs", "3", "--batch-size", "8", "--lr", "1e18",
    )
    assert code != 0
    assert "step" in err and any(ch.isdigit() for ch in err)


def test_invalid_log_level_rejected(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("XMAL_LOG", "loud")
    code, out, err = run(
        capsys, "gen-data", "--pairs", "4", "--K", "4", "--D", "16",
        "--out", str(tmp_path / "x.xmal"),
    )
    assert code != 0
    assert "XMAL_LOG" in err


def test_log_levels_accepted(tmp_path, capsys, monkeypatch):
    for level in ("error", "info", "debug"):
        monkeypatch.setenv("XMAL_LOG", level)
        code, _, err = run(
            capsys, "gen-data", "--pairs", "4", "--K", "4", "--D", "16",
            "--out", str(tmp_path / f"{level}.xmal"),
        )
        assert code == 0, err


def test_threads_flag_validated(tmp_path, capsys):
    code, out, err = run(
        capsys, "gen-data", "--pairs", "4", "--K", "4", "--D", "16",
        "--out", str(tmp_path / "t.xmal"), "--threads", "0",
    )
    assert code != 0
    assert "threads" in err
