"""Command-line client for the sctfusion service.

Subcommands mirror the service endpoints: ``gen-data``, ``train``, ``eval``,
``gradcheck``, ``params`` (plus ``serve`` to start the HTTP server). By default
each command talks to an in-process instance of the app over an ASGI test
transport — one command, one process, no server required; pass ``--server
http://host:port`` to target a running instance instead (paths in the config
are then interpreted on the server's filesystem).

Exit codes: 0 success, 1 gradcheck failure, 2 configuration/transport errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import httpx

from .configs import RunConfig, load_run_config
from .errors import SctFusionError


def _client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=None)
    from fastapi.testclient import TestClient

    from .service import app

    return TestClient(app, raise_server_exceptions=False)


def _load_config(path: str) -> RunConfig:
    try:
        return load_run_config(path)
    except FileNotFoundError:
        raise SctFusionError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise SctFusionError(f"config file {path} is not valid JSON: {exc}")


def _post(client: httpx.Client, endpoint: str, payload: dict) -> dict:
    response = client.post(endpoint, json=payload)
    if response.status_code >= 400:
        try:
            detail = response.json().get("detail")
        except ValueError:
            detail = response.text
        raise SctFusionError(f"{endpoint} failed ({response.status_code}): {detail}")
    return response.json()


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _default_dataset_dir(config: RunConfig) -> str:
    return config.train.dataset_dir or str(Path(config.output_dir) / "dataset")


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    if config.generator is None:
        raise SctFusionError("run config has no 'generator' section")
    generator = config.generator
    if args.seed is not None:
        generator = generator.model_copy(update={"seed": args.seed})
    out_dir = args.out or _default_dataset_dir(config)
    with _client(args.server) as client:
        result = _post(
            client, "/gen-data", {"config": generator.model_dump(), "out_dir": out_dir}
        )
    _emit(result)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    with _client(args.server) as client:
        result = _post(
            client,
            "/train",
            {
                "config": config.model_dump(),
                "out_dir": args.out,
                "seed": args.seed,
                "mode": args.mode,
            },
        )
    _emit(result)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    with _client(args.server) as client:
        result = _post(
            client,
            "/eval",
            {
                "checkpoint": args.checkpoint,
                "dataset_dir": _default_dataset_dir(config),
                "eval_count": config.train.eval_count,
                "metrics": config.metrics.model_dump(),
                "out_dir": args.out,
            },
        )
    _emit(result)
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    with _client(args.server) as client:
        result = _post(
            client,
            "/gradcheck",
            {"config": config.model_dump(), "seed": args.seed, "mode": args.mode},
        )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(
            json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    _emit(result)
    return 0 if result["passed"] else 1


def cmd_params(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    with _client(args.server) as client:
        result = _post(
            client,
            "/params",
            {
                "config": config.model_dump(),
                "out_dir": args.out,
                "seed": args.seed,
                "mode": args.mode,
            },
        )
    _emit(result)
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("sctfusion.service:app", host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sctfusion",
        description="Generate data, train, evaluate, gradient-check and size "
        "class-token-fusion models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, mode: bool = True, checkpoint: bool = False):
        p.add_argument("--config", required=True, help="run config JSON path")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        if mode:
            p.add_argument(
                "--mode",
                default=None,
                help="model mode override: sct, early or single:<modality>",
            )
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint file")
        p.add_argument("--server", default=None, help="remote service URL (default: in-process)")

    common(sub.add_parser("gen-data", help="generate a synthetic dataset"), mode=False)
    common(sub.add_parser("train", help="train a model and write checkpoint/history"))
    common(sub.add_parser("eval", help="evaluate a checkpoint"), mode=False, checkpoint=True)
    common(sub.add_parser("gradcheck", help="finite-difference gradient check"))
    common(sub.add_parser("params", help="parameter accounting / embedding-dim sweep"))

    serve = sub.add_parser("serve", help="start the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "params": cmd_params,
    "serve": cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except SctFusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except httpx.HTTPError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
