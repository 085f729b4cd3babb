"""Command-line client for training, evaluation, ablations, and sweeps.

Commands build the same request bodies the HTTP service accepts and run
them in-process by default; pass --server to forward the request to a
running service instead.  Exit codes: 2 invalid config, 3 dataset errors,
4 numeric abort during training.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError
from .data import DatasetError
from .runner import ABLATION_VARIANTS, EVAL_MODES
from .service.schemas import (
    AblateRequest,
    ConfigPatch,
    EvalRequest,
    SweepRequest,
    SyntheticRequest,
    TrainRequest,
)
from .trainer import TrainAbort

__all__ = ["main"]

_EXIT_CODES = {ConfigError: 2, DatasetError: 3, TrainAbort: 4}
DEFAULT_SWEEP = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--preset", choices=("paper", "tiny"), help="named default set")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--out-dir", help="output directory")
    p.add_argument("--synthetic", metavar="CxI",
                   help="generate a CxI synthetic dataset instead of loading one")
    p.add_argument("--images-dir", help="image dataset root")
    p.add_argument("--embeddings-csv", help="embedding table CSV")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--lambda-loss", type=float, dest="lambda_loss",
                   help="hybrid loss weight in [0, 1]")
    p.add_argument("--server", metavar="URL",
                   help="send the request to a running service instead of "
                        "executing in-process")


def _patch_from_args(args: argparse.Namespace) -> ConfigPatch:
    fields = {}
    for name in ("preset", "seed", "out_dir", "synthetic", "images_dir",
                 "embeddings_csv", "epochs", "lambda_loss"):
        val = getattr(args, name, None)
        if val is not None:
            fields[name] = val
    if args.config is not None:
        fields["config_path"] = args.config
    return ConfigPatch(**fields)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protograph",
        description="Few-shot biometric recognition with prototype-node "
                    "class graphs")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run episodic training")
    _add_config_flags(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_flags(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--mode", choices=EVAL_MODES, default="biometric")

    p_ablate = sub.add_parser("ablate", help="train full model vs one variant")
    _add_config_flags(p_ablate)
    p_ablate.add_argument("--variant", choices=ABLATION_VARIANTS, required=True)

    p_sweep = sub.add_parser("sweep-lambda",
                             help="train once per loss weight and compare")
    _add_config_flags(p_sweep)
    p_sweep.add_argument("--lambdas",
                         help="comma-separated weights (default "
                              "0.0,0.2,0.4,0.6,0.8,1.0)")

    p_gen = sub.add_parser("gen-synthetic", help="write a synthetic dataset")
    _add_config_flags(p_gen)
    p_gen.add_argument("--kind", choices=("images", "embeddings"),
                       default="images")

    p_serve = sub.add_parser("serve", help="start the HTTP service")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8000)
    return parser


def _parse_lambdas(raw: str | None) -> list[float]:
    if raw is None:
        return list(DEFAULT_SWEEP)
    try:
        return [float(v) for v in raw.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"cannot parse lambda list {raw!r}")


def _remote(server: str, endpoint: str, body: dict) -> dict:
    import httpx

    resp = httpx.post(server.rstrip("/") + endpoint, json=body, timeout=None)
    if resp.status_code >= 400:
        try:
            detail = resp.json().get("detail", {})
        except ValueError:
            detail = {}
        msg = detail.get("error", resp.text) if isinstance(detail, dict) else str(detail)
        code = detail.get("code", 1) if isinstance(detail, dict) else 1
        print(f"error: {msg}", file=sys.stderr)
        return {"__exit__": int(code)}
    return resp.json()


def _dispatch(args: argparse.Namespace) -> dict:
    patch = _patch_from_args(args)
    if args.command == "train":
        req = TrainRequest(config=patch)
        if args.server:
            return _remote(args.server, "/train", req.model_dump())
        from .runner import run_train
        from .service.app import resolve_config
        return run_train(resolve_config(req.config))
    if args.command == "eval":
        req = EvalRequest(config=patch, checkpoint=args.checkpoint, mode=args.mode)
        if args.server:
            return _remote(args.server, "/eval", req.model_dump())
        from .runner import run_eval
        from .service.app import resolve_config
        return run_eval(resolve_config(req.config), req.checkpoint, req.mode)
    if args.command == "ablate":
        req = AblateRequest(config=patch, variant=args.variant)
        if args.server:
            return _remote(args.server, "/ablate", req.model_dump())
        from .runner import run_ablate
        from .service.app import resolve_config
        return run_ablate(resolve_config(req.config), req.variant)
    if args.command == "sweep-lambda":
        req = SweepRequest(config=patch, lambdas=_parse_lambdas(args.lambdas))
        if args.server:
            return _remote(args.server, "/sweep-lambda", req.model_dump())
        from .runner import run_sweep_lambda
        from .service.app import resolve_config
        return run_sweep_lambda(resolve_config(req.config), req.lambdas)
    if args.command == "gen-synthetic":
        req = SyntheticRequest(config=patch, kind=args.kind)
        if args.server:
            return _remote(args.server, "/synthetic", req.model_dump())
        from .runner import run_gen_synthetic
        from .service.app import resolve_config
        return run_gen_synthetic(resolve_config(req.config), req.kind)
    if args.command == "serve":
        import uvicorn

        from .service.app import app
        uvicorn.run(app, host=args.host, port=args.port)
        return {}
    raise AssertionError(f"unhandled command {args.command}")


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        result = _dispatch(args)
    except (ConfigError, DatasetError, TrainAbort) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_CODES[type(exc)]
    if "__exit__" in result:
        return result["__exit__"]
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
