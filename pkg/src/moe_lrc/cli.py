"""Thin-client CLI: every subcommand posts to the pipeline service.

With no ``--server`` the FastAPI app runs in-process (same filesystem, no
network), so the commands behave like a plain local tool; pointing
``--server`` at a remote instance sends identical requests there, in which
case all paths are interpreted on the server.

Exit codes: 0 success, 1 config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import httpx

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

DEFAULT_TIMEOUT = 600.0


def _post_remote(server: str, path: str, payload: dict) -> httpx.Response:
    with httpx.Client(base_url=server, timeout=DEFAULT_TIMEOUT) as client:
        return client.post(path, json=payload)


def _post_in_process(path: str, payload: dict) -> httpx.Response:
    import asyncio

    from .service import app

    async def go() -> httpx.Response:
        transport = httpx.ASGITransport(app=app)
        async with httpx.AsyncClient(transport=transport, timeout=DEFAULT_TIMEOUT,
                                     base_url="http://moe-lrc.local") as client:
            return await client.post(path, json=payload)

    return asyncio.run(go())


def _load_config_file(path: str | None) -> dict | None:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        print(f"config error: file not found: {p}", file=sys.stderr)
        return None
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        print(f"config error: invalid JSON in {p}: {exc}", file=sys.stderr)
        return None


def _print_result(result: dict) -> None:
    for key, value in result.items():
        print(f"{key} = {value}")


def _format_detail(detail) -> str:
    if isinstance(detail, list):  # request-model validation errors
        parts = []
        for err in detail:
            loc = ".".join(str(x) for x in err.get("loc", []) if x != "body")
            parts.append(f"{loc}: {err.get('msg')}")
        return "; ".join(parts)
    return str(detail)


def _post(server: str | None, path: str, payload: dict) -> int:
    resp = _post_remote(server, path, payload) if server else _post_in_process(path, payload)
    if resp.status_code == 200:
        _print_result(resp.json())
        return EXIT_OK
    detail = _format_detail(resp.json().get("detail", resp.text))
    if resp.status_code in (400, 422):
        print(f"config error: {detail}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"runtime error: {detail}", file=sys.stderr)
    return EXIT_RUNTIME


def _stage_payload(args) -> dict | None:
    config = _load_config_file(args.config)
    if config is None:
        return None
    payload = {"config": config, "out": args.out}
    if args.preset:
        payload["preset"] = args.preset
    if args.seed is not None:
        payload["seed"] = args.seed
    return payload


def _add_common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="path to a JSON run config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--preset", help="dimension preset (mixtral-8x7b, mixtral-8x22b, "
                                    "deepseek-16b)")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--server", help="post to a running service instead of in-process")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moe-lrc",
        description="Low-bit MoE compression with router-guided low-rank "
                    "restoration and an offload transfer-cost simulator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic MoE model")
    _add_common(p)

    p = sub.add_parser("stats", help="kurtosis/error and routing-score reports")
    _add_common(p)
    p.add_argument("--model", required=True, help="model directory from `gen`")

    p = sub.add_parser("compress", help="quantize + allocate ranks + build compensators")
    _add_common(p)
    p.add_argument("--model", required=True, help="model directory from `gen`")

    p = sub.add_parser("infer", help="fidelity of quantized/compensated forwards")
    _add_common(p)
    p.add_argument("--model", required=True, help="model directory from `gen`")
    p.add_argument("--artifact", required=True, help="artifact directory from `compress`")
    p.add_argument("--mode", default="compensated",
                   choices=["reference", "quantized", "compensated"])

    p = sub.add_parser("simulate", help="replay a trace through the cost model")
    _add_common(p)
    p.add_argument("--trace", required=True, help="trace.jsonl from `stats`")

    p = sub.add_parser("report", help="merge throughput and fidelity tables")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--sim-csv", help="sim_report.csv from `simulate`")
    p.add_argument("--fidelity-csv", help="fidelity.csv from `infer`")
    p.add_argument("--server", help="post to a running service instead of in-process")

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "serve":
        import uvicorn

        uvicorn.run("moe_lrc.service:app", host=args.host, port=args.port)
        return EXIT_OK

    if args.command == "report":
        payload = {"out": args.out}
        if args.sim_csv:
            payload["sim_csv"] = args.sim_csv
        if args.fidelity_csv:
            payload["fidelity_csv"] = args.fidelity_csv
        return _post(args.server, "/report", payload)

    payload = _stage_payload(args)
    if payload is None:
        return EXIT_CONFIG

    if args.command == "stats":
        payload["model_path"] = args.model
    elif args.command == "compress":
        payload["model_path"] = args.model
    elif args.command == "infer":
        payload["model_path"] = args.model
        payload["artifact_path"] = args.artifact
        payload["mode"] = args.mode
    elif args.command == "simulate":
        payload["trace_path"] = args.trace

    return _post(args.server, f"/{args.command}", payload)


if __name__ == "__main__":
    sys.exit(main())
