"""``vdib`` command line: a thin client of the job service.

With ``--server`` (or VDIB_SERVER_URL) jobs go to a running service;
otherwise an in-process app is used, so no server is needed locally.
Exit codes: 0 success, 1 check failure, 2 config error, 3 I/O error.
"""

from __future__ import annotations

import json
import logging
import sys
import time
import warnings

import click
import httpx

from .harness.config import _parse_value
from .harness.service import EXIT_CODES, create_app

SERVER_ENV = "VDIB_SERVER_URL"
TERMINAL = ("succeeded", "failed")


class Client:
    def __init__(self, server: str | None, poll: float = 0.2):
        self.poll = poll
        if server:
            self.http = httpx.Client(base_url=server, timeout=30.0)
        else:
            with warnings.catch_warnings():  # starlette nags about its httpx backend
                warnings.simplefilter("ignore")
                from fastapi.testclient import TestClient
            self.http = TestClient(create_app())

    def run(self, payload: dict) -> tuple[dict, int]:
        """Submit, wait for the job, return (body, exit code)."""
        try:
            resp = self.http.post("/jobs", json=payload)
            if resp.status_code == 422:
                return {"error": _validation_text(resp.json())}, EXIT_CODES["config"]
            body = resp.json()
            if resp.status_code >= 400:
                return {"error": body.get("detail", resp.text)}, body.get("exit_code", 1)
            job_id = body["id"]
            while body["state"] not in TERMINAL:
                time.sleep(self.poll)
                body = self.http.get(f"/jobs/{job_id}").json()
        except httpx.HTTPError as exc:
            return {"error": f"cannot reach the job service: {exc}"}, EXIT_CODES["io"]
        return body, body.get("exit_code") or 0


def _validation_text(body) -> str:
    detail = body.get("detail", body)
    if isinstance(detail, list):
        return "; ".join(f"{'.'.join(str(p) for p in d.get('loc', []))}: {d.get('msg')}"
                         for d in detail)
    return str(detail)


def _emit(ctx, body: dict, code: int, lines=None):
    if ctx.obj["json"]:
        click.echo(json.dumps(body, indent=2, default=str))
    elif code == 0 or body.get("result"):
        for line in (lines(body.get("result") or {}) if lines else
                     [json.dumps(body.get("result"), indent=2, default=str)]):
            click.echo(line)
    if code != 0:
        click.echo(f"error: {body.get('error', 'failed')}", err=True)
    ctx.exit(code)


def _submit(ctx, kind: str, lines=None, **fields):
    payload = {"kind": kind, **{k: v for k, v in fields.items() if v is not None}}
    body, code = Client(ctx.obj["server"]).run(payload)
    _emit(ctx, body, code, lines)


def config_options(f):
    f = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                     help="Override one config field (repeatable).")(f)
    f = click.option("--preset", type=click.Choice(["desk", "paper"]), default=None,
                     help="Start from the desk-scale or full-scale defaults.")(f)
    f = click.option("--config", "config_path", type=click.Path(), default=None,
                     help="TOML or JSON config file.")(f)
    return f


@click.group()
@click.option("--server", envvar=SERVER_ENV, default=None,
              help=f"Job service URL (env {SERVER_ENV}); in-process when unset.")
@click.option("--json", "as_json", is_flag=True, help="Print the full job record as JSON.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, server, as_json, verbose):
    """Hybrid spiking encoder / ANN decoder trained with the VDIB objective."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.ensure_object(dict)
    ctx.obj["server"] = server
    ctx.obj["json"] = as_json


def _train_lines(res):
    s = res.get("summary", {})
    out = [f"run_dir: {res.get('run_dir')}"]
    if s.get("task") == "predictive_coding":
        out.append(f"mse: {s['mse']['mean']:.4f} +- {s['mse']['std']:.4f} "
                   f"(untrained {s['untrained_mse']['mean']:.4f})")
        out.append(f"spike_rate: {s['spike_rate']['mean']:.4f} +- {s['spike_rate']['std']:.4f}")
        out.append(f"accuracy: {s['accuracy']['mean']:.4f}")
    else:
        for mode in ("time", "rate"):
            if mode in s:
                out.append(f"{mode}: mse {s[mode]['mse']['mean']:.4f} "
                           f"accuracy {s[mode]['accuracy']['mean']:.4f}")
    return out


@main.command()
@config_options
@click.option("--out", type=click.Path(), default=None, help="Run directory (default: output_dir).")
@click.option("--workers", type=int, default=1, show_default=True, help="Parallel seed workers.")
@click.pass_context
def train(ctx, config_path, preset, overrides, out, workers):
    """Train over every seed and write the run artifacts."""
    _submit(ctx, "train", _train_lines, config_path=config_path, preset=preset,
            overrides=list(overrides), out=out, workers=workers)


@main.command(name="eval")
@click.argument("checkpoint", type=click.Path())
@config_options
@click.pass_context
def eval_(ctx, checkpoint, config_path, preset, overrides):
    """Score a checkpoint on held-out data (config defaults to the one it was trained with)."""
    _submit(ctx, "eval", lambda r: [f"{k}: {v}" for k, v in r.get("metrics", {}).items()],
            checkpoint=checkpoint, config_path=config_path, preset=preset,
            overrides=list(overrides))


def _sweep_lines(res):
    out = ["value,mse,spike_rate,accuracy"]
    for v, m in res.get("means", {}).items():
        out.append(f"{v},{m['mse']:.5f},{m['spike_rate']:.5f},{m['accuracy']:.5f}")
    return out


@main.command(name="sweep")
@click.argument("axis", type=click.Choice(["beta", "delta", "tau_e", "tau_d"]))
@click.argument("values")
@config_options
@click.option("--out", type=click.Path(), required=True, help="Long-format CSV path.")
@click.option("--workers", type=int, default=1, show_default=True)
@click.pass_context
def sweep_cmd(ctx, axis, values, config_path, preset, overrides, out, workers):
    """One run per comma-separated VALUE per seed, e.g. `sweep beta 0.1,1,10`."""
    vals = [_parse_value(v.strip()) for v in values.split(",") if v.strip()]
    _submit(ctx, "sweep", _sweep_lines, axis=axis, values=vals, config_path=config_path,
            preset=preset, overrides=list(overrides), out=out, workers=workers)


@main.command(name="gradcheck")
@click.option("--scope", type=click.Choice(["all", "decoder", "readout", "oracle"]),
              default="all", show_default=True)
@click.pass_context
def gradcheck_cmd(ctx, scope):
    """Finite-difference and enumeration checks; exit 1 on any failure."""
    _submit(ctx, "gradcheck", lambda r: [
        f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['value']:.3e} "
        f"(tol {c['tolerance']:.0e}, {c['seconds']:.1f}s)" for c in r.get("checks", [])],
        scope=scope)


@main.command(name="gen-data")
@config_options
@click.option("-n", "n", type=int, default=100, show_default=True, help="Number of samples.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True, help="Container file to write.")
@click.pass_context
def gen_data(ctx, config_path, preset, overrides, n, seed, out):
    """Write task input spike trains to the binary container (+ JSON sidecar)."""
    _submit(ctx, "gen-data", lambda r: [f"wrote {r.get('n')} samples to {r.get('path')}"],
            config_path=config_path, preset=preset, overrides=list(overrides), n=n, seed=seed,
            out=out)


@main.command(name="export-repr")
@click.argument("checkpoint", type=click.Path())
@config_options
@click.option("-n", "n", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--full", is_flag=True, help="Also write the full flattened readout train.")
@click.option("--out", type=click.Path(), required=True)
@click.pass_context
def export_repr(ctx, checkpoint, config_path, preset, overrides, n, seed, full, out):
    """Readout spike counts per sample (label first) as CSV, for external embedding."""
    _submit(ctx, "export-repr", lambda r: [f"wrote {r.get('path')}"], checkpoint=checkpoint,
            config_path=config_path, preset=preset, overrides=list(overrides), n=n, seed=seed,
            full=full, out=out)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host, port):
    """Run the job service."""
    import uvicorn

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
