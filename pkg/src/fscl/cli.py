"""Thin CLI client of the service API.

Every subcommand builds a request model and sends it through the HTTP
interface: against a remote server when ``--server`` is given, otherwise
against the app mounted in-process (no separate server needed, same code
path).  Responses are printed as JSON; failures print a machine-readable
error JSON to stderr and exit nonzero.  Paths in requests are interpreted
on the service host.
"""

from __future__ import annotations

import asyncio
import json
import sys
from pathlib import Path

import click
import httpx

from .config import ExperimentConfig, desk_scale_config, load_config
from .errors import ConfigError, FsclError


def _load_experiment_config(path: str | None, seed: int | None) -> ExperimentConfig:
    if path is None:
        config = desk_scale_config(seed=seed if seed is not None else 0)
    else:
        config = load_config(Path(path).read_text())
    if seed is not None:
        config.seed = seed
        config.session_spec.seed = seed
        if config.dataset.synthetic is not None:
            config.dataset.synthetic.seed = seed
    return config


def _post(server: str | None, path: str, payload: dict) -> httpx.Response:
    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            return client.post(path, json=payload)

    from .service.app import app

    async def go() -> httpx.Response:
        transport = httpx.ASGITransport(app=app, raise_app_exceptions=False)
        async with httpx.AsyncClient(
            transport=transport, base_url="http://fscl", timeout=None
        ) as client:
            return await client.post(path, json=payload)

    return asyncio.run(go())


def _finish(resp: httpx.Response) -> None:
    try:
        doc = resp.json()
    except ValueError:
        doc = {"error": "bad_response", "message": resp.text}
    text = json.dumps(doc, indent=2, sort_keys=True)
    if resp.status_code // 100 == 2:
        click.echo(text)
    else:
        click.echo(text, err=True)
        sys.exit(1)


def _fail(exc: FsclError) -> None:
    click.echo(json.dumps(exc.payload(), indent=2, sort_keys=True), err=True)
    sys.exit(1)


@click.group()
@click.option("--server", default=None, metavar="URL",
              help="Remote service URL; defaults to running in-process.")
@click.option("--config", "config_path", default=None, type=click.Path(),
              help="Experiment config JSON; defaults to the desk-scale preset.")
@click.option("--seed", default=None, type=int,
              help="Override every seed in the config.")
@click.option("--out-dir", default="fscl_out", show_default=True,
              help="Artifact directory (service-host path).")
@click.pass_context
def main(ctx, server, config_path, seed, out_dir):
    """Few-shot class-incremental learning toolkit."""
    ctx.ensure_object(dict)
    ctx.obj.update(server=server, config_path=config_path, seed=seed, out_dir=out_dir)


def _config_from_ctx(ctx) -> ExperimentConfig:
    return _load_experiment_config(ctx.obj["config_path"], ctx.obj["seed"])


@main.command("synth-gen")
@click.pass_context
def synth_gen(ctx):
    """Generate synthetic train/test feature-store files."""
    try:
        config = _config_from_ctx(ctx)
        if config.dataset.synthetic is None:
            raise ConfigError("config has no synthetic dataset section")
        payload = {
            "synthetic": config.dataset.synthetic.model_dump(),
            "out_dir": ctx.obj["out_dir"],
        }
    except FsclError as exc:
        _fail(exc)
    _finish(_post(ctx.obj["server"], "/datasets/synthetic", payload))


@main.command("train-base")
@click.pass_context
def train_base(ctx):
    """Run base-phase training and save the encoder checkpoint."""
    try:
        payload = {
            "config": _config_from_ctx(ctx).model_dump(),
            "out_dir": ctx.obj["out_dir"],
        }
    except FsclError as exc:
        _fail(exc)
    _finish(_post(ctx.obj["server"], "/train/base", payload))


@main.command("run-sessions")
@click.option("--encoder", default=None, type=click.Path(),
              help="Reuse a trained encoder checkpoint.")
@click.pass_context
def run_sessions(ctx, encoder):
    """Run the full protocol and write the session report."""
    try:
        payload = {
            "config": _config_from_ctx(ctx).model_dump(),
            "out_dir": ctx.obj["out_dir"],
            "encoder_path": encoder,
        }
    except FsclError as exc:
        _fail(exc)
    _finish(_post(ctx.obj["server"], "/sessions/run", payload))


@main.command("eval")
@click.option("--encoder", required=True, type=click.Path())
@click.option("--classifier", required=True, type=click.Path())
@click.option("--data", required=True, type=click.Path(),
              help="Feature-store file to evaluate on.")
@click.pass_context
def eval_cmd(ctx, encoder, classifier, data):
    """Evaluate saved encoder + classifier checkpoints on a dataset."""
    payload = {
        "encoder_path": encoder,
        "classifier_path": classifier,
        "dataset_path": data,
    }
    _finish(_post(ctx.obj["server"], "/evaluate", payload))


@main.command("export-embeddings")
@click.option("--encoder", required=True, type=click.Path())
@click.option("--data", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path(),
              help="Destination CSV (label + embedding coordinates).")
@click.pass_context
def export_embeddings(ctx, encoder, data, out):
    """Export raw embeddings as CSV for external projection tools."""
    payload = {"encoder_path": encoder, "dataset_path": data, "out_path": out}
    _finish(_post(ctx.obj["server"], "/embeddings/export", payload))


@main.command("ablate")
@click.pass_context
def ablate(ctx):
    """Run the ablation flag matrix and write per-variant reports."""
    try:
        payload = {
            "config": _config_from_ctx(ctx).model_dump(),
            "out_dir": ctx.obj["out_dir"],
        }
    except FsclError as exc:
        _fail(exc)
    _finish(_post(ctx.obj["server"], "/ablate", payload))


@main.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8572, show_default=True, type=int)
def serve(host, port):
    """Start the service with uvicorn."""
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
