import json
import socket
import subprocess
import sys

import pytest

from conftest import serving
from zklora.cli import main
from zklora.mpi.server import Contributor
from zklora.tensorio import load_lora, read_tensors


@pytest.fixture
def model_dir(tmp_path):
    assert main(["gen-model", "--out", str(tmp_path), "--seed", "3", "--layers", "12x10,10x8,8x6",
                 "--lora", "0:4,1:2,2:4", "--batch", "3"]) == 0
    return tmp_path


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_gen_model_layout(model_dir):
    assert (model_dir / "model").is_dir() and (model_dir / "lora").is_dir()
    assert read_tensors(model_dir / "input.zklt")["X"].shape == (12, 3)


def test_infer_prove_verify(model_dir, tmp_path, capsys):
    manifest, weights = load_lora(model_dir / "lora")
    c = Contributor(manifest, weights, witness_root=tmp_path / "wit")
    with serving(c) as (host, port):
        rc = main(["infer", "--connect", f"{host}:{port}", "--model", str(model_dir / "model"),
                   "--input", str(model_dir / "input.zklt"), "--out", str(tmp_path / "y.zklt"),
                   "--report", str(tmp_path / "report.json"), "--session-dir", str(tmp_path / "sess"),
                   "--proof-dir", str(tmp_path / "online")])
    assert rc == 0
    assert read_tensors(tmp_path / "y.zklt")["Y"].shape == (6, 3)
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["overall"] == "Accept" and report["totals"]["num_modules"] == 3

    (wdir,) = list((tmp_path / "wit").iterdir())
    assert main(["prove", "--witness", str(wdir), "--out", str(tmp_path / "offline")]) == 0
    for f in (tmp_path / "online").iterdir():
        assert (tmp_path / "offline" / f.name).read_bytes() == f.read_bytes()
    assert main(["verify", "--proofs", str(tmp_path / "offline"), "--session", str(tmp_path / "sess")]) == 0

    target = sorted((tmp_path / "offline").iterdir())[1]
    raw = bytearray(target.read_bytes())
    raw[-40] ^= 1
    target.write_bytes(bytes(raw))
    capsys.readouterr()
    assert main(["verify", "--proofs", str(tmp_path / "offline"), "--session", str(tmp_path / "sess"),
                 "--report", str(tmp_path / "bad.json")]) == 1
    err = capsys.readouterr().err
    assert "module 1" in err
    bad = json.loads((tmp_path / "bad.json").read_text())
    assert bad["overall"] == "Reject" and [m["module_id"] for m in bad["modules"] if not m["accepted"]] == [1]


def test_connect_failure_exit_code(model_dir, capsys):
    rc = main(["infer", "--connect", f"127.0.0.1:{_free_port()}", "--model", str(model_dir / "model"),
               "--input", str(model_dir / "input.zklt"), "--timeout", "2"])
    assert rc == 3
    assert "ConnectFailed" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["infer", "--model", "m"],
    ["gen-model", "--out", "x", "--layers", "12by10"],
    ["bench", "--regimes", "1:2:3"],
])
def test_usage_errors(argv):
    assert main(argv) == 2


def test_config_file_merging(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"out": str(tmp_path / "m"), "layers": "6x4", "lora": "0:2", "seed": 1}))
    assert main(["gen-model", "--config", str(cfg), "--batch", "2"]) == 0
    assert read_tensors(tmp_path / "m" / "input.zklt")["X"].shape == (6, 2)
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["gen-model", "--config", str(cfg)]) == 2


def test_verify_missing_session_is_runtime_error(tmp_path):
    assert main(["verify", "--proofs", str(tmp_path), "--session", str(tmp_path / "nope")]) == 3


@pytest.mark.slow
def test_contribute_subprocess(model_dir, tmp_path):
    port = _free_port()
    proc = subprocess.Popen([sys.executable, "-m", "zklora.cli", "contribute", "--listen", f"127.0.0.1:{port}",
                             "--weights", str(model_dir / "lora"), "--state", str(tmp_path / "state")],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    try:
        line = proc.stdout.readline()
        assert line.startswith("listening on 127.0.0.1:")
        rc = main(["infer", "--connect", f"127.0.0.1:{port}", "--model", str(model_dir / "model"),
                   "--input", str(model_dir / "input.zklt")])
        assert rc == 0
    finally:
        proc.terminate()
        proc.wait(timeout=10)
    assert (tmp_path / "state" / "budget.json").exists()
