import io
import subprocess
import sys

import numpy as np
import pytest

from _corpus import mobilenet_like_layer, rep_inputs, tiny_model
from wesq.cli import main
from wesq.model import LayerSpec, ModelGraph, load_quantized, save_model, save_tensor_dir


def run(*argv):
    out = io.StringIO()
    code = main(list(map(str, argv)), out=out)
    return code, [dict(kv.split("=", 1) for kv in line.split()) for line in out.getvalue().splitlines()]


@pytest.fixture()
def workspace(tmp_path):
    rng = np.random.default_rng(0)
    save_model(tiny_model(rng), tmp_path / "m")
    save_tensor_dir(tmp_path / "d", rep_inputs(rng, 12))
    rng.uniform(-1, 1, (8, 8, 3)).astype("<f4").tofile(tmp_path / "x.f32")
    return tmp_path


@pytest.mark.parametrize("scheme", ["lwq", "cwq", "wes"])
def test_quantize_writes_model(workspace, scheme):
    code, recs = run("quantize", "--scheme", scheme, "--model", workspace / "m",
                     "--rep-data", workspace / "d", "--out", workspace / "q.bin")
    assert code == 0
    assert [r["layer"] for r in recs[:-1]] == ["0", "1", "2", "3"]
    assert int(recs[-1]["bytes"]) == (workspace / "q.bin").stat().st_size
    assert all(l.scheme == scheme for l in load_quantized(workspace / "q.bin").layers)
    if scheme == "wes":
        assert all("r_hat" in r and "shift_hist" in r for r in recs[:-1])


def test_quantize_cwq_with_clip(workspace):
    code, _ = run("quantize", "--scheme", "cwq", "--clip", "--model", workspace / "m",
                  "--rep-data", workspace / "d", "--out", workspace / "q.bin")
    assert code == 0


def test_quantize_with_pruning(workspace):
    code, recs = run("quantize", "--model", workspace / "m", "--rep-data", workspace / "d",
                     "--out", workspace / "q.bin", "--prune-threshold", "0.05", "--max-samples", "4")
    assert code == 0 and all(float(r["sparsity"]) > 0 for r in recs[:-1])


def test_quantize_without_rep_data(workspace, capsys):
    code, _ = run("quantize", "--model", workspace / "m", "--out", workspace / "q.bin")
    assert code == 1
    assert "rep-data" in capsys.readouterr().err


def test_simulate_check(workspace):
    run("quantize", "--model", workspace / "m", "--rep-data", workspace / "d", "--out", workspace / "q.bin")
    code, recs = run("simulate", "--model", workspace / "q.bin", "--input", workspace / "x.f32",
                     "--float-input", "--check", "--strict", "--out", workspace / "y.u8")
    assert code == 0
    checks = recs[:-1]
    assert len(checks) == 4 and all(r["ok"] == "True" for r in checks)
    assert all(float(r["max_dev"]) <= float(r["bound"]) for r in checks)
    assert np.fromfile(workspace / "y.u8", dtype=np.uint8).size == 5


def test_simulate_is_repeatable(workspace):
    run("quantize", "--model", workspace / "m", "--rep-data", workspace / "d", "--out", workspace / "q.bin")
    outs = []
    for name in ("a.u8", "b.u8"):
        run("simulate", "--model", workspace / "q.bin", "--input", workspace / "x.f32",
            "--float-input", "--out", workspace / name)
        outs.append((workspace / name).read_bytes())
    assert outs[0] == outs[1]


def test_simulate_wrong_input_size(workspace):
    run("quantize", "--model", workspace / "m", "--rep-data", workspace / "d", "--out", workspace / "q.bin")
    (workspace / "x.u8").write_bytes(bytes(10))
    code, _ = run("simulate", "--model", workspace / "q.bin", "--input", workspace / "x.u8",
                  "--out", workspace / "y.u8")
    assert code == 1


def test_simulate_bad_magic(workspace, capsys):
    (workspace / "q.bin").write_bytes(b"XXXX" + bytes(32))
    code, _ = run("simulate", "--model", workspace / "q.bin", "--input", workspace / "x.f32",
                  "--out", workspace / "y.u8")
    assert code == 1
    assert "bad magic" in capsys.readouterr().err


def mobilenet_chain(tmp_path):
    rng = np.random.default_rng(3)
    layers, c = [], 8
    for _ in range(3):
        layers.append(LayerSpec("depthwise_conv2d", mobilenet_like_layer(rng, c), padding=(1, 1, 1, 1),
                                activation="relu6"))
        layers.append(LayerSpec("conv2d", rng.normal(0, 0.2, (1, 1, c, 2 * c)), activation="relu6"))
        c *= 2
    save_model(ModelGraph((6, 6, 8), layers, "chain"), tmp_path / "chain")
    return tmp_path / "chain"


def test_report_overlap_improves_on_depthwise(tmp_path):
    code, recs = run("report", "--model", mobilenet_chain(tmp_path), "--schemes", "lwq,cwq,wes")
    assert code == 0
    range_rows = [r for r in recs if "overlap" in r]
    assert len(range_rows) == 6
    for r in range_rows:
        if r["kind"] == "depthwise_conv2d":
            assert float(r["overlap_wes"]) >= float(r["overlap"])
    size_rows = [r for r in recs if "scheme" in r]
    assert {r["scheme"] for r in size_rows} == {"lwq", "cwq", "wes"}


def test_report_without_schemes(tmp_path):
    code, recs = run("report", "--model", mobilenet_chain(tmp_path))
    assert code == 0
    assert all("scheme" not in r and "overlap" in r for r in recs)


def test_report_depthwise_1024_size(tmp_path):
    w = np.random.default_rng(4).normal(size=(3, 3, 1, 1024))
    save_model(ModelGraph((4, 4, 1024), [LayerSpec("depthwise_conv2d", w)]), tmp_path / "dw")
    code, recs = run("report", "--model", tmp_path / "dw", "--schemes", "lwq,wes")
    assert code == 0
    wes_row = next(r for r in recs if r.get("scheme") == "wes")
    assert float(wes_row["vs_lwq_pct"]) == pytest.approx(5.55, abs=0.01)


def test_report_quantized_file(workspace):
    run("quantize", "--model", workspace / "m", "--rep-data", workspace / "d", "--out", workspace / "q.bin")
    code, recs = run("report", "--model", workspace / "m", "--quantized", workspace / "q.bin")
    assert code == 0
    assert recs[-1]["layers"] == "4" and recs[-1]["schemes"] == "wes"


def test_console_entry_point(workspace):
    res = subprocess.run([sys.executable, "-m", "wesq", "report", "--model", str(workspace / "m")],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert res.stdout.count("layer=") == 4
