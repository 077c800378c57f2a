import csv
import hashlib
import io
import json
import socket
import struct
import threading

import numpy as np
import pytest

from redash.cli import _int_list, main
from redash.model import Conv2d, Dense, Model, ReLU, save_model


@pytest.fixture
def real_model(tmp_path):
    rng = np.random.default_rng(0)
    m = Model((3, 4, 4), [Conv2d(3, 2, 3, 1, 1, rng.normal(0, 0.05, (2, 3, 3, 3)), rng.normal(0, 0.02, 2)), ReLU(),
                          Dense(3, rng.normal(0, 0.05, (3, 32)), rng.normal(0, 0.02, 3))])
    return save_model(m, tmp_path / "m.json")


@pytest.fixture
def quantized(tmp_path, real_model):
    out = tmp_path / "q.json"
    assert main(["quantize", str(real_model), "--base", "32,167,173", "--scale", "32", "--input-bound", "16",
                 "--out", str(out)]) == 0
    return out


def test_int_list():
    assert _int_list("1,2,4") == [1, 2, 4]
    assert _int_list("2..4") == [2, 3, 4]
    assert _int_list("2^7..2^9") == [128, 256, 512]


def test_quantize_errors(real_model, tmp_path, capsys):
    assert main(["quantize", str(real_model), "--base", "4,6", "--scale", "2"]) == 2
    assert "NonCoprime" in capsys.readouterr().err
    assert main(["quantize", str(real_model), "--scheme", "simple", "--alpha", "0", "--base", "2,3,5"]) == 2
    assert main(["quantize", str(real_model), "--base", "2,3,5", "--scale", "7"]) == 2
    assert main(["quantize", str(tmp_path / "missing.json"), "--scale", "32"]) == 4


def test_infer_local(quantized, tmp_path, capsys):
    x = np.random.default_rng(1).integers(-16, 17, (3, 4, 4))
    np.save(tmp_path / "x.npy", x)
    assert main(["infer-local", str(quantized), "--input", str(tmp_path / "x.npy"), "--lambda", "16"]) == 0
    out = json.loads(capsys.readouterr().out)
    from redash.cli import _load_quantized
    from redash.nn import plaintext_infer
    assert out == plaintext_infer(_load_quantized(quantized), x).tolist()


def test_garble_encode_evaluate_decode(quantized, tmp_path, capsys):
    gm, keys = tmp_path / "gm.bin", tmp_path / "keys.bin"
    args = ["garble", str(quantized), "--seed", "s1", "--lambda", "16", "--out", str(gm), "--keys", str(keys)]
    assert main(args) == 0
    first = hashlib.sha256(gm.read_bytes()).hexdigest()
    assert main(args) == 0
    assert hashlib.sha256(gm.read_bytes()).hexdigest() == first
    x = np.random.default_rng(2).integers(-10, 11, (3, 4, 4))
    (tmp_path / "x.json").write_text(json.dumps(x.tolist()))
    assert main(["encode", "--keys", str(keys), "--input", str(tmp_path / "x.json"),
                 "--out", str(tmp_path / "in.bin")]) == 0
    assert main(["evaluate", str(gm), "--labels", str(tmp_path / "in.bin"), "--out", str(tmp_path / "out.bin")]) == 0
    capsys.readouterr()
    assert main(["decode", "--keys", str(keys), "--labels", str(tmp_path / "out.bin")]) == 0
    out = json.loads(capsys.readouterr().out)
    from redash.cli import _load_quantized
    from redash.nn import plaintext_infer
    assert out == plaintext_infer(_load_quantized(quantized), x).tolist()

    data = bytearray(gm.read_bytes())
    data[4:6] = struct.pack("<H", 7)
    bad = tmp_path / "bad.bin"
    bad.write_bytes(bytes(data))
    assert main(["evaluate", str(bad), "--labels", str(tmp_path / "in.bin"), "--out", str(tmp_path / "o.bin")]) == 3


def test_config_file(quantized, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lambda": 16, "seed": "cfg", "input-bound": 3}))
    assert main(["infer-local", str(quantized), "--config", str(cfg)]) == 0
    a = capsys.readouterr().out
    assert main(["infer-local", str(quantized), "--lambda", "16", "--seed", "cfg", "--input-bound", "3"]) == 0
    assert capsys.readouterr().out == a
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert main(["infer-local", str(quantized), "--config", str(cfg)]) == 2


def test_cost_csv(capsys):
    assert main(["cost"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert len(rows) == 7
    k3 = next(r for r in rows if r["k"] == "3")
    assert k3["formula"] == "8" and k3["measured"] == "7"
    for r in rows:
        assert int(r["chained"]) == 5 * int(r["single_step"])
    assert main(["cost", "--base", "2,3,5", "--scale", "5"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["formula_count"] == 8 and rep["be_measured"] == 7


def test_bench_single_row(tmp_path):
    out = tmp_path / "b.csv"
    assert main(["bench-scaling", "--sweep", "inputs", "--input-sizes", "1", "--k", "3", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 1 and rows[0]["inputs"] == "1"
    assert main(["bench-scaling", "--sweep", "threads", "--threads", "1,2", "--input-size", "8", "--k", "3",
                 "--out", str(out)]) == 0
    assert [r["threads"] for r in csv.DictReader(out.open())] == ["1", "2"]


def test_arch(tmp_path, capsys):
    assert main(["arch", "F", "--input-size", "8", "--out", str(tmp_path / "F.json")]) == 0
    assert "output (10,)" in capsys.readouterr().out


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.mark.parametrize("owner", ["garbler", "evaluator"])
def test_tcp_session(quantized, tmp_path, capsys, owner):
    port = _free_port()
    x = np.random.default_rng(3).integers(-5, 6, (3, 4, 4))
    np.save(tmp_path / "x.npy", x)
    ev_args = ["run-evaluator", "--listen", f"127.0.0.1:{port}"]
    g_args = ["run-garbler", str(quantized), "--connect", f"127.0.0.1:{port}", "--lambda", "16",
              "--input-owner", owner, "--out", str(tmp_path / "y.json")]
    if owner == "evaluator":
        ev_args += ["--input", str(tmp_path / "x.npy")]
    else:
        g_args += ["--input", str(tmp_path / "x.npy")]
    box = {}
    t = threading.Thread(target=lambda: box.setdefault("rc", main(ev_args)))
    t.start()
    rc = 4
    for _ in range(50):
        rc = main(g_args)
        if rc != 4:
            break
        threading.Event().wait(0.1)
    t.join()
    assert rc == 0 and box["rc"] == 0
    from redash.cli import _load_quantized
    from redash.nn import plaintext_infer
    assert json.loads((tmp_path / "y.json").read_text()) == plaintext_infer(_load_quantized(quantized), x).tolist()


def test_connect_refused():
    assert main(["run-evaluator", "--connect", f"127.0.0.1:{_free_port()}"]) == 4
