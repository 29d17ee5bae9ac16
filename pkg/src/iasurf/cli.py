"""Thin command-line client of the service.

Subcommands map one-to-one onto service endpoints; by default requests run
against the in-process app (same filesystem), `--server URL` targets a
running instance instead. Exit codes: 0 ok, 1 tolerance failure, 2 input
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
from pathlib import Path

import httpx

from .schemas import RunConfig


def _load_config(args) -> dict:
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read config: {exc}", file=sys.stderr)
            sys.exit(2)
    else:
        data = {}
    if args.grid:
        parts = args.grid.split(",")
        if len(parts) not in (3, 5):
            print("error: --grid expects nx,ny,h[,x0,y0]", file=sys.stderr)
            sys.exit(2)
        grid = {"nx": int(parts[0]), "ny": int(parts[1]), "h": float(parts[2])}
        if len(parts) == 5:
            grid["x0"] = float(parts[3])
            grid["y0"] = float(parts[4])
        data["grid"] = {**data.get("grid", {}), **grid}
    if args.family:
        data.setdefault("family", {})["name"] = args.family
    if args.out:
        data["output_dir"] = args.out
    if args.tol is not None:
        data.setdefault("tolerances", {})["sup"] = args.tol
    pipeline = data.setdefault("pipeline", {})
    if getattr(args, "backlund", False):
        pipeline["backlund"] = True
    if getattr(args, "dual", False):
        pipeline["dual"] = True
    if getattr(args, "reparam", None):
        parts = [float(t) for t in args.reparam.split(",")]
        if len(parts) != 3:
            print("error: --reparam expects scale,shift_x,shift_y", file=sys.stderr)
            sys.exit(2)
        pipeline["reparam"] = {
            "scale": parts[0], "shift_x": parts[1], "shift_y": parts[2]
        }
    if getattr(args, "lelieuvre", False):
        pipeline["lelieuvre"] = True
    return data


def _post(args, path: str, payload: dict) -> tuple[int, dict]:
    if args.server:
        with httpx.Client(base_url=args.server, timeout=600.0) as client:
            resp = client.post(path, json=payload)
            return resp.status_code, resp.json()

    async def go():
        from .service import app

        transport = httpx.ASGITransport(app=app)
        async with httpx.AsyncClient(
            transport=transport, base_url="http://iasurf.local", timeout=600.0
        ) as client:
            resp = await client.post(path, json=payload)
            return resp.status_code, resp.json()

    return asyncio.run(go())


def _finish(status: int, body: dict) -> int:
    print(json.dumps(body, indent=2))
    if status == 200:
        return int(body.get("exit_code", 0))
    if status in (400, 422):
        return 2
    return int(body.get("exit_code", 3))


def _add_common(sp, pipeline_flags=False):
    sp.add_argument("--config", help="run-config JSON path")
    sp.add_argument("--grid", help="nx,ny,h[,x0,y0] override")
    sp.add_argument("--family", help="family name override")
    sp.add_argument("--out", help="output directory override")
    sp.add_argument("--tol", type=float, help="absolute sup-norm tolerance override")
    sp.add_argument("--server", help="base URL of a running service (default: in-process)")
    if pipeline_flags:
        sp.add_argument("--backlund", action="store_true")
        sp.add_argument("--dual", action="store_true")
        sp.add_argument("--reparam", help="scale,shift_x,shift_y affine reparametrization")
        sp.add_argument("--lelieuvre", action="store_true")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="iasurf",
        description="Isothermally asymptotic surface laboratory (batch front end)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("generate", help="build a family and verify residuals"))
    _add_common(
        sub.add_parser("transform", help="generate plus Backlund/dual/reparam stages"),
        pipeline_flags=True,
    )
    _add_common(
        sub.add_parser("reconstruct", help="generate, transform, reconstruct surfaces"),
        pipeline_flags=True,
    )
    _add_common(
        sub.add_parser("export", help="full pipeline as configured"),
        pipeline_flags=True,
    )

    vp = sub.add_parser("verify", help="residual-check dumped IAF1 fields")
    vp.add_argument("paths", nargs="+", help="field files (one or two resolution groups)")
    vp.add_argument("--equation", required=True,
                    choices=["mvn", "vn", "gc", "roman", "kummer", "cubic"])
    vp.add_argument("--tol", type=float)
    vp.add_argument("--server", help="base URL of a running service")

    svp = sub.add_parser("serve", help="run the HTTP service")
    svp.add_argument("--host", default="127.0.0.1")
    svp.add_argument("--port", type=int, default=8000)

    args = parser.parse_args(argv)

    if args.command == "serve":
        import uvicorn

        from .service import app

        uvicorn.run(app, host=args.host, port=args.port)
        return 0

    if args.command == "verify":
        payload = {"equation": args.equation, "paths": args.paths}
        if args.tol is not None:
            payload["tolerance"] = args.tol
        status, body = _post(args, "/verify", payload)
        return _finish(status, body)

    data = _load_config(args)
    try:
        config = RunConfig.model_validate(data)
    except Exception as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 2
    endpoint = {
        "generate": "/generate",
        "transform": "/transform",
        "reconstruct": "/reconstruct",
        "export": "/run",
    }[args.command]
    status, body = _post(args, endpoint, config.model_dump())
    return _finish(status, body)


if __name__ == "__main__":
    sys.exit(main())
