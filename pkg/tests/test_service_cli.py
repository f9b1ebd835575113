import json
import time
import warnings

import pytest
from click.testing import CliRunner

from vdib import cli
from vdib.harness import service
from vdib.harness.gradcheck import CheckResult, GradcheckReport

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    from fastapi.testclient import TestClient

TINY = ["--set", "n_train=20", "--set", "log_every=10", "--set", "test_T=60", "--set", "seeds=0"]


@pytest.fixture
def client():
    return TestClient(service.create_app())


def wait(client, job_id, timeout=120):
    t0 = time.time()
    while True:
        body = client.get(f"/jobs/{job_id}").json()
        if body["state"] in ("succeeded", "failed"):
            return body
        assert time.time() - t0 < timeout
        time.sleep(0.05)


def test_health(client):
    assert client.get("/health").json() == {"status": "ok"}


def test_config_error_rejected_at_submission(client):
    r = client.post("/jobs", json={"kind": "train", "overrides": ["beta=-1"]})
    assert r.status_code == 400
    assert r.json()["error_kind"] == "config" and r.json()["exit_code"] == 2
    r = client.post("/jobs", json={"kind": "sweep", "axis": "beta", "values": []})
    assert r.status_code == 400
    r = client.post("/jobs", json={"kind": "gradcheck", "scope": "nope"})
    assert r.status_code == 400
    r = client.post("/jobs", json={"kind": "fly"})
    assert r.status_code == 422


def test_missing_files_are_io(client, tmp_path):
    r = client.post("/jobs", json={"kind": "train", "config_path": str(tmp_path / "x.toml")})
    assert r.status_code == 404 and r.json()["exit_code"] == 3
    r = client.post("/jobs", json={"kind": "eval", "checkpoint": str(tmp_path / "c.npz")})
    assert r.status_code == 404 and r.json()["exit_code"] == 3


def test_unknown_job(client):
    assert client.get("/jobs/abc").status_code == 404


def test_job_lifecycle(client, tmp_path):
    r = client.post("/jobs", json={"kind": "gen-data", "n": 2, "out": str(tmp_path / "d.bin"),
                                   "overrides": ["T=10"]})
    assert r.status_code == 202 and r.json()["state"] in ("queued", "running", "succeeded")
    body = wait(client, r.json()["id"])
    assert body["state"] == "succeeded" and body["exit_code"] == 0
    assert (tmp_path / "d.bin").exists()
    assert any(j["id"] == body["id"] for j in client.get("/jobs").json())


def test_failing_check_reports_exit_one(client, monkeypatch):
    report = GradcheckReport([CheckResult("x", False, 1.0, 1e-6)])
    monkeypatch.setattr(service, "gradcheck", lambda scope: report)
    r = client.post("/jobs", json={"kind": "gradcheck"})
    body = wait(client, r.json()["id"])
    assert body["state"] == "failed" and body["exit_code"] == 1
    assert body["result"]["passed"] is False


def test_runtime_io_error_in_job(client, tmp_path):
    r = client.post("/jobs", json={"kind": "train", "overrides": [
        "task=mnist_naturalize", f"data_root={tmp_path}", "n_train=1"]})
    body = wait(client, r.json()["id"])
    assert body["error_kind"] == "io" and body["exit_code"] == 3


# --- CLI ---------------------------------------------------------------------------------


def run(*args):
    return CliRunner().invoke(cli.main, list(args), catch_exceptions=False)


def test_cli_gradcheck_decoder():
    res = run("gradcheck", "--scope", "decoder")
    assert res.exit_code == 0
    assert res.output.count("PASS") == 6


def test_cli_gradcheck_failure_exit(monkeypatch):
    report = GradcheckReport([CheckResult("readout_eligibility_fd", False, 0.1, 1e-6)])
    monkeypatch.setattr(service, "gradcheck", lambda scope: report)
    res = run("gradcheck")
    assert res.exit_code == 1 and "FAIL readout_eligibility_fd" in res.output


def test_cli_exit_codes(tmp_path):
    assert run("train", "--set", "beta=-1").exit_code == 2
    assert run("train", "--set", "bogus").exit_code == 2
    assert run("train", "--config", str(tmp_path / "none.toml")).exit_code == 3
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert run("train", "--config", str(bad)).exit_code == 2
    assert run("eval", str(tmp_path / "none.npz")).exit_code == 3


def test_cli_train_eval_export(tmp_path):
    out = tmp_path / "run"
    res = run("train", *TINY, "--out", str(out))
    assert res.exit_code == 0 and "mse:" in res.output
    snap = json.loads((out / "config.json").read_text())
    assert snap["n_train"] == 20 and snap["beta"] == 1.0
    ck = out / "checkpoint_seed0.npz"
    res = run("eval", str(ck))
    assert res.exit_code == 0 and "spike_rate" in res.output
    res = run("--json", "export-repr", str(ck), "-n", "3", "--out", str(tmp_path / "r.csv"))
    assert res.exit_code == 0 and json.loads(res.output)["state"] == "succeeded"
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 4


def test_cli_sweep_and_gen_data(tmp_path):
    res = run("sweep", "tau_d", "1,2", *TINY, "--out", str(tmp_path / "s.csv"))
    assert res.exit_code == 0
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 3
    res = run("gen-data", "--set", "T=12", "-n", "2", "--out", str(tmp_path / "g.bin"))
    assert res.exit_code == 0 and (tmp_path / "g.bin.json").exists()


def test_cli_unreachable_server():
    res = CliRunner().invoke(cli.main, ["--server", "http://127.0.0.1:9", "gradcheck"])
    assert res.exit_code == 3
