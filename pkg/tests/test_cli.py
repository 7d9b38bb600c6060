import json

import pytest

from ndpmoe.cli import main
import oracles as o

SMALL = ["--prompt-len", "16", "--output-len", "4"]


def _kv(text):
    return dict(line.split("=", 1) for line in text.strip().splitlines())


def test_simulate_ok(capsys):
    assert main(["simulate", "--model", "mixtral-8x7b", "--policy", "tp", "--ndp", "6", *SMALL]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["policy"] == "tp" and rep["supported"] and rep["end_to_end_s"] > 0


def test_simulate_not_supported(capsys):
    assert main(["simulate", "--model", "mixtral-8x7b", "--ndp", "2", *SMALL]) == 3
    captured = capsys.readouterr()
    assert json.loads(captured.out)["supported"] is False
    assert "not supported" in captured.err


def test_bad_policy_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--model", "mixtral-8x7b", "--policy", "bogus"])
    assert exc.value.code == 2


@pytest.mark.parametrize("argv", [
    ["simulate", "--model", "nope"],
    ["simulate"],
    ["simulate", "--model", "mixtral-8x7b", "--prompt-len", "0"],
    ["simulate", "--model", "mixtral-8x7b", "--trace", "x.trace", "--seed", "1"],
    ["simulate", "--model", "mixtral-8x7b", "--policy", "tp", "--dump-prefetch", "p.txt"],
    ["simulate", "--model", "mixtral-8x7b", "--config", "missing.yaml"],
])
def test_usage_errors_exit_2(argv, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2
    assert "ndpmoe: error:" in capsys.readouterr().err


def test_solve_balance_mixtral(capsys):
    assert main(["solve-balance", "--model", "mixtral-8x7b", "--ndp", "6",
                 "--print-primitives"]) == 0
    kv = _kv(capsys.readouterr().out)
    assert float(kv["e_g"]) == pytest.approx(o.MIXTRAL_E_G, abs=1e-12)
    assert float(kv["e_max"]) == pytest.approx(o.MIXTRAL_E_MAX, rel=1e-12)
    assert float(kv["t_w"]) == pytest.approx(o.MIXTRAL_T_W, rel=1e-12)
    assert kv["clamped"] == "false"


def test_solve_balance_prefill(capsys):
    assert main(["solve-balance", "--model", "mixtral-8x7b", "--ndp", "6",
                 "--stage", "prefill", "--seq", "1"]) == 0
    kv = _kv(capsys.readouterr().out)
    # one prompt token degenerates to the decode balance
    assert float(kv["e_g"]) == pytest.approx(o.MIXTRAL_E_G, abs=1e-12)
    assert "e_max" not in kv


def test_trace_gen_then_simulate(tmp_path, capsys):
    trace = tmp_path / "q.trace"
    assert main(["trace-gen", "--model", "qwen3-30b-a3b", "--seed", "4", *SMALL,
                 "-o", str(trace)]) == 0
    assert trace.read_text().startswith("#moe-trace v1 model=qwen3-30b-a3b")
    common = ["simulate", "--model", "qwen3-30b-a3b", "--policy", "tp-lb", "--ndp", "4", *SMALL]
    assert main([*common, "--trace", str(trace)]) == 0
    from_file = capsys.readouterr().out
    assert main([*common, "--seed", "4"]) == 0
    assert capsys.readouterr().out == from_file


def test_dump_prefetch(tmp_path, capsys):
    path = tmp_path / "p.txt"
    assert main(["simulate", "--model", "mixtral-8x7b", "--ndp", "6", *SMALL,
                 "--dump-prefetch", str(path), "--out", str(tmp_path / "r.json")]) == 0
    lines = path.read_text().splitlines()
    assert lines[0] == "#prefetch v1 x=1"
    assert len(lines) == 1 + 32
    for i, line in enumerate(lines[1:]):
        layer, ids = line.split(",")
        assert int(layer) == i and len(ids.split(";")) == 1
    assert json.loads((tmp_path / "r.json").read_text())["prefetch_x"] == 1


def test_ablate_outputs(tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--models", "qwen3-30b-a3b", "--ndp-list", "4", *SMALL,
                 "--out-dir", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["qwen3-30b-a3b_decode.csv", "qwen3-30b-a3b_decode.svg",
                     "qwen3-30b-a3b_prefill.csv", "qwen3-30b-a3b_prefill.svg"]
    dec = (out / "qwen3-30b-a3b_decode.csv").read_text().splitlines()[1:]
    pre = (out / "qwen3-30b-a3b_prefill.csv").read_text().splitlines()[1:]
    assert sorted(r.split(",")[1] for r in dec) == ["ep", "tp", "tp-lb", "tp-lb-pre"]
    assert sorted(r.split(",")[1] for r in pre) == ["ep", "tp", "tp-lb"]


def test_sweep_outputs(tmp_path, capsys):
    out = tmp_path / "sw"
    assert main(["sweep", "--models", "mixtral-8x7b", "--ndp-list", "2,6", *SMALL,
                 "--out-dir", str(out)]) == 0
    assert {p.name for p in out.iterdir()} == {
        "sweep.csv", "sweep.json", "sweep_prefill.svg", "sweep_decode.svg",
        "sweep_end_to_end.svg"}
    text = (out / "sweep.csv").read_text()
    assert "mixtral-8x7b,tp,2,decode,N.S.,N.S." in text
    assert "tp-lb-pre over ondemand: geomean" in capsys.readouterr().out


def test_sweep_baseline_must_be_included(tmp_path):
    assert main(["sweep", "--models", "mixtral-8x7b", "--policies", "tp,ep",
                 "--out-dir", str(tmp_path)]) == 2


def test_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model: deepseek-moe\nworkload:\n  prompt_len: 8\n  output_len: 2\n")
    assert main(["simulate", "--config", str(cfg), "--policy", "cpu", "--ndp", "4"]) == 0
    assert json.loads(capsys.readouterr().out)["model"] == "deepseek-moe"
