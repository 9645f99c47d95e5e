import json

import pytest

from dsbf import cli
from dsbf.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL, EXIT_OK, main

SMALL_TRAIN = dict(n=120, m_iters=2, n_iters=1, hidden_dim=8, feat_dim=8, bottleneck_dim=4,
                   per_class=4)


def write_spec(path, **kw):
    path.write_text(json.dumps(kw))
    return str(path)


@pytest.fixture(autouse=True)
def _isolate(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv(cli.OUTPUT_ROOT_ENV, raising=False)


def test_help_exits_zero(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "gradcheck" in capsys.readouterr().out


def test_unknown_command_is_config_error():
    assert main(["nope"]) == EXIT_CONFIG


def test_unknown_spec_key_is_named(tmp_path, capsys):
    spec = write_spec(tmp_path / "s.json", lamda=1.0)
    assert main(["train", "--spec", spec]) == EXIT_CONFIG
    assert "lamda" in capsys.readouterr().err


def test_invalid_json_is_config_error(tmp_path):
    (tmp_path / "s.json").write_text("{not json")
    assert main(["train", "--spec", str(tmp_path / "s.json")]) == EXIT_CONFIG


def test_invalid_value_is_config_error(tmp_path):
    assert main(["train", "--spec", write_spec(tmp_path / "s.json", mode="bogus")]) == EXIT_CONFIG


def test_missing_spec_file_is_io_error(tmp_path):
    assert main(["train", "--spec", str(tmp_path / "absent.json")]) == EXIT_IO


def test_negative_seed_rejected():
    assert main(["gen", "--seed", "-1"]) == EXIT_CONFIG


def test_gen_writes_domains_and_spec(tmp_path):
    assert main(["gen", "--out", "d", "--quiet", "--seed", "3"]) == EXIT_OK
    names = sorted(p.name for p in (tmp_path / "d").iterdir())
    assert names == ["domain_0.csv", "domain_1.csv", "domain_2.csv", "toy_spec.json"]
    first = (tmp_path / "d" / "domain_0.csv").read_bytes()
    assert main(["gen", "--out", "d", "--quiet", "--seed", "3"]) == EXIT_OK
    assert (tmp_path / "d" / "domain_0.csv").read_bytes() == first


def test_train_prints_table_and_writes_outputs(tmp_path, capsys):
    spec = write_spec(tmp_path / "s.json", seed=5, **SMALL_TRAIN)
    assert main(["train", "--spec", spec, "--out", "run"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "mode sldg  seed 5"
    assert out[1].split() == ["domain", "role", "accuracy"]
    assert [l.split()[1] for l in out[2:]] == ["labeled", "unlabeled", "target"]
    summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert summary["seed"] == 5 and summary["spec_echo"]["m_iters"] == 2


def test_train_rerun_is_byte_identical(tmp_path):
    spec = write_spec(tmp_path / "s.json", **SMALL_TRAIN)
    for d in ("a", "b"):
        assert main(["train", "--spec", spec, "--out", d, "--quiet"]) == EXIT_OK
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_seed_flag_overrides_spec(tmp_path):
    spec = write_spec(tmp_path / "s.json", seed=1, **SMALL_TRAIN)
    assert main(["train", "--spec", spec, "--out", "r", "--seed", "9", "--quiet"]) == EXIT_OK
    assert json.loads((tmp_path / "r" / "summary.json").read_text())["seed"] == 9


def test_train_from_generated_csv(tmp_path):
    assert main(["gen", "--out", "d", "--quiet", "--spec",
                 write_spec(tmp_path / "g.json", n=120)]) == EXIT_OK
    spec = write_spec(tmp_path / "s.json", data=["d/domain_0.csv", "d/domain_1.csv", "d/domain_2.csv"],
                      labeled=0, unlabeled=[1], target=2, dump_pseudo=True,
                      **{k: v for k, v in SMALL_TRAIN.items() if k != "n"})
    assert main(["train", "--spec", spec, "--out", "r", "--quiet"]) == EXIT_OK
    assert (tmp_path / "r" / "pseudo_labels.csv").exists()


def test_overlapping_roles_rejected(tmp_path):
    spec = write_spec(tmp_path / "s.json", labeled=0, target=0, **SMALL_TRAIN)
    assert main(["train", "--spec", spec, "--quiet"]) == EXIT_CONFIG


def test_spec_out_is_relative_to_spec_dir(tmp_path, monkeypatch):
    (tmp_path / "cfg").mkdir()
    spec = write_spec(tmp_path / "cfg" / "s.json", out="res", **SMALL_TRAIN)
    (tmp_path / "elsewhere").mkdir()
    monkeypatch.chdir(tmp_path / "elsewhere")
    assert main(["train", "--spec", spec, "--quiet"]) == EXIT_OK
    assert (tmp_path / "cfg" / "res" / "metrics.csv").exists()


def test_output_root_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert main(["gen", "--out", "d", "--quiet"]) == EXIT_OK
    assert (tmp_path / "root" / "d" / "domain_0.csv").exists()


def test_unwritable_output_is_io_error(tmp_path):
    (tmp_path / "blocker").write_text("")
    assert main(["gen", "--out", "blocker/sub", "--quiet"]) == EXIT_IO


def test_theory_reports_and_is_deterministic(tmp_path, capsys):
    spec = write_spec(tmp_path / "t.json", n_grid=[50, 100, 200], reps=5)
    assert main(["theory", "--spec", spec, "--out", "a"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "slope " in out and "naive_factor " in out
    assert main(["theory", "--spec", spec, "--out", "b", "--quiet"]) == EXIT_OK
    assert capsys.readouterr().out == ""
    assert (tmp_path / "a" / "rate.csv").read_bytes() == (tmp_path / "b" / "rate.csv").read_bytes()
    assert json.loads((tmp_path / "a" / "rate.json").read_text())["reps"] == 5


def test_theory_singular_spec_is_config_error(tmp_path):
    spec = write_spec(tmp_path / "t.json", phi=[[[0, 0], [0, 0]]] * 3, n_grid=[50], reps=2)
    assert main(["theory", "--spec", spec]) == EXIT_CONFIG


def test_gradcheck_pass_and_injected_fault(capsys):
    assert main(["gradcheck", "--n-seeds", "1"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert [l.split()[0] for l in lines] == ["cl", "im", "cu", "fp", "bf", "s2"]
    assert all(l.endswith("PASS") for l in lines)
    assert main(["gradcheck", "--n-seeds", "1", "--inject-fault", "fp", "--quiet"]) == EXIT_NUMERICAL


def test_sweep_small_grid(tmp_path):
    spec = write_spec(tmp_path / "s.json", lambda_grid=[0.5, 1], gamma_grid=[1], **SMALL_TRAIN)
    assert main(["sweep", "--spec", spec, "--out", "sw", "--quiet"]) == EXIT_OK
    lines = (tmp_path / "sw" / "sweep.csv").read_text().splitlines()
    assert lines[0] == "lambda,gamma,exit_code,acc_target,acc_labeled,acc_unlabeled_mean"
    assert [l.split(",")[:3] for l in lines[1:]] == [["0.5", "1", "0"], ["1", "1", "0"]]


def test_sweep_records_numerical_failure(tmp_path, monkeypatch):
    from dsbf.numerics import NumericalError
    real = cli._train

    def flaky(ctx, cfg, out):
        if cfg.lam == 2.0:
            raise NumericalError("boom")
        return real(ctx, cfg, out)

    monkeypatch.setattr(cli, "_train", flaky)
    spec = write_spec(tmp_path / "s.json", lambda_grid=[1, 2], gamma_grid=[1], **SMALL_TRAIN)
    assert main(["sweep", "--spec", spec, "--out", "sw", "--quiet"]) == EXIT_NUMERICAL
    rows = (tmp_path / "sw" / "sweep.csv").read_text().splitlines()[1:]
    assert [r.split(",")[2] for r in rows] == ["0", "2"]


def test_numerical_error_maps_to_exit_two(monkeypatch, capsys):
    from dsbf.numerics import NumericalError

    def boom(*a, **k):
        raise NumericalError("non-finite gradient")

    monkeypatch.setattr(cli, "gen_toy_domains", boom)
    assert main(["gen", "--quiet"]) == EXIT_NUMERICAL
    assert "numerical error" in capsys.readouterr().err
