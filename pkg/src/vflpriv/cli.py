"""Command-line client.

Each verb builds a service request and either executes it in-process or, with
``--remote URL``, submits it to a running ``vflpriv serve`` and polls.

Exit codes: 0 success, 2 config error, 3 runtime error.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click

from vflpriv.errors import ConfigError
from vflpriv.service import ops
from vflpriv.service.schemas import GradcheckRequest, JobInfo, MatrixRequest, ReportRequest, RunRequest

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _fail(code: int, msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _load_json(path: str) -> dict:
    p = Path(path)
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError("<file>", f"{p}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"{p}: malformed JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    return data


def _remote(url: str, endpoint: str, req, poll: float = 1.0) -> JobInfo:
    import httpx

    with httpx.Client(base_url=url, timeout=60.0) as client:
        r = client.post(endpoint, json=req.model_dump(mode="json"))
        if r.status_code == 422:
            detail = r.json().get("detail")
            path = detail.get("path", "<root>") if isinstance(detail, dict) else "<request>"
            raise ConfigError(path, str(detail.get("message", detail) if isinstance(detail, dict) else detail))
        r.raise_for_status()
        job = JobInfo.model_validate(r.json())
        while job.status in ("queued", "running"):
            time.sleep(poll)
            job = JobInfo.model_validate(client.get(f"/jobs/{job.id}").json())
    if job.status == "failed":
        if job.error_kind == "config":
            raise ConfigError(job.error_path or "<root>", job.error or "")
        raise RuntimeError(job.error)
    return job


def _guard(fn):
    """Map exceptions to the documented exit codes."""
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(EXIT_CONFIG, f"config error: {exc}")
        except Exception as exc:
            _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _print_summaries(summaries) -> None:
    for s in summaries:
        mp = "-" if s.min_privacy is None else f"{s.min_privacy:.4f}"
        click.echo(f"{s.arm:10s} accuracy={s.final_accuracy:.4f} {s.metric or 'privacy'}={mp} -> {s.out_dir}")


@click.group()
def main():
    """Privacy experiments for split (vertical federated) training."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override the config's master seed.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")
@click.option("--log-features", is_flag=True, help="Also write the victim's captured features.")
@click.option("--remote", default=None, help="URL of a running service.")
@_guard
def run(config_path, seed, out, log_features, remote):
    """Run a single experiment arm."""
    req = RunRequest(config=_load_json(config_path), seed=seed, out=out, log_features=log_features)
    if remote:
        _print_summaries(_remote(remote, "/runs", req).results)
    else:
        _print_summaries(ops.do_run(req))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--arms", default="baseline,naive,basic,fbs", show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.option("--jobs", type=int, default=1, show_default=True, help="Arms run in parallel processes.")
@click.option("--remote", default=None)
@_guard
def matrix(config_path, arms, seed, out, jobs, remote):
    """Run several arms on one config and emit plot data."""
    arm_list = [a.strip() for a in arms.split(",") if a.strip()]
    if not arm_list:
        raise ConfigError("arms", "no arms given")
    req = MatrixRequest(config=_load_json(config_path), arms=arm_list, seed=seed, out=out, jobs=jobs)
    if remote:
        _print_summaries(_remote(remote, "/matrix", req).results)
    else:
        _print_summaries(ops.do_matrix(req))


@main.command()
@click.option("--cases", type=int, default=24, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--tolerance", type=float, default=1e-4, show_default=True)
@_guard
def gradcheck(cases, seed, tolerance):
    """Compare backprop with central differences on random small networks."""
    res = ops.do_gradcheck(GradcheckRequest(cases=cases, seed=seed, tolerance=tolerance))
    for c in res.cases:
        click.echo(f"{c.loss:4s} {' '.join(c.layers):60s} {c.max_rel_error:.3e}")
    click.echo(f"worst {res.worst:.3e} ({'pass' if res.passed else 'FAIL'} at {tolerance:g})")
    if not res.passed:
        sys.exit(EXIT_RUNTIME)


@main.command()
@click.option("--runs", required=True, type=click.Path(file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_guard
def report(runs, out):
    """Rebuild scatter.csv and curves.csv from existing run directories."""
    res = ops.do_report(ReportRequest(runs=runs, out=out))
    click.echo(f"{res.runs} runs -> {res.scatter}, {res.curves}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@_guard
def serve(host, port):
    """Start the HTTP service (needs uvicorn)."""
    try:
        import uvicorn
    except ImportError:
        raise RuntimeError("uvicorn is not installed; pip install 'artifact[serve]'") from None
    uvicorn.run("vflpriv.service.app:app", host=host, port=port)


if __name__ == "__main__":
    main()
