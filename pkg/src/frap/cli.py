"""Command-line client for the generation service.

Every subcommand marshals its arguments into the service's request models.
With ``--server`` the request goes over HTTP to a running instance; without
it the same handlers run in-process, so outputs are identical either way.

Exit codes: 0 on success, 1 on usage/configuration errors, 2 when runs
failed (batch failures, non-finite losses, or a failing gradient check).
The FRAP_SEED environment variable, when set, overrides every seed argument.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import urllib.error
import urllib.request
from pathlib import Path

import numpy as np

from .harness import (
    ABLATION_VARIANTS,
    ConfigError,
    ReportError,
    report as local_report,
    resolve_dataset,
)
from .loop import write_ppm
from .prompts import PromptError, load_vocabulary
from .service import handlers, schemas

USAGE_ERROR = 1
RUN_FAILURE = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(USAGE_ERROR)


class UsageError(Exception):
    pass


class Client:
    """Dispatches request models to HTTP endpoints or in-process handlers."""

    _LOCAL = {
        "/run": (handlers.handle_run, schemas.RunRequest),
        "/batch": (handlers.handle_batch, schemas.BatchRequest),
        "/ablate": (handlers.handle_ablate, schemas.AblateRequest),
        "/datasets/expand": (handlers.handle_dataset, schemas.DatasetRequest),
        "/gradcheck": (handlers.handle_gradcheck, schemas.GradCheckRequest),
        "/report": (handlers.handle_report, schemas.ReportRequest),
    }

    def __init__(self, server: str | None):
        self.server = server.rstrip("/") if server else None

    def call(self, path: str, request) -> dict:
        if self.server is None:
            handler, _ = self._LOCAL[path]
            try:
                return handler(request).model_dump()
            except (ConfigError, ReportError, PromptError, ValueError) as exc:
                raise UsageError(str(exc)) from exc
        payload = request.model_dump_json().encode("utf-8")
        http_req = urllib.request.Request(
            self.server + path, data=payload, headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(http_req) as resp:
                return json.load(resp)
        except urllib.error.HTTPError as exc:
            body = exc.read().decode("utf-8", "replace")
            if exc.code in (400, 422):
                raise UsageError(f"server rejected request: {body}") from exc
            raise RuntimeError(f"server error {exc.code}: {body}") from exc
        except urllib.error.URLError as exc:
            raise RuntimeError(f"cannot reach {self.server}: {exc.reason}") from exc


def _env_seed() -> int | None:
    raw = os.environ.get("FRAP_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"FRAP_SEED must be an integer, got {raw!r}") from None


def _load_json(path, what: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {what} {path}: {exc}") from exc


def _loop_overrides(args) -> schemas.LoopOverrides:
    return schemas.LoopOverrides(
        steps=args.steps,
        t_end=args.t_end,
        t_select=args.t_select,
        batch=args.batch,
        eta=args.eta,
        beta=args.beta,
        variant=args.variant,
        static_phi=args.static_phi,
        select=args.select,
    )


def _objective_overrides(args) -> schemas.ObjectiveOverrides:
    return schemas.ObjectiveOverrides(
        lam=args.lam,
        presence_variant=args.presence_variant,
        binding_variant=args.binding_variant,
    )


def cmd_run(args, client: Client) -> int:
    seed = _env_seed()
    req = schemas.RunRequest(
        prompt_markup=args.prompt,
        prompt_spec=_load_json(args.prompt_file, "prompt file") if args.prompt_file else None,
        seed=seed if seed is not None else args.seed,
        loop=_loop_overrides(args),
        objective=_objective_overrides(args),
    )
    record = client.call("/run", req)
    if args.out:
        Path(args.out).write_text(json.dumps(record), encoding="utf-8")
    if args.ppm:
        write_ppm(args.ppm, np.asarray(record["image"], dtype=np.uint8))
    final = record["losses"][-1]
    print(
        f"{record['prompt_id']} seed={record['seed']} variant={record['variant']} "
        f"calls={record['call_count']} final_loss={final['total']:.6g}"
    )
    return 0


def _experiment_payload(args) -> dict:
    cfg = _load_json(args.config, "experiment config")
    base = Path(args.config).parent
    dataset = dict(cfg.get("dataset") or {})
    for key in ("prompts", "vocab"):
        if key in dataset and not Path(dataset[key]).is_absolute():
            dataset[key] = str(base / dataset[key])
    try:
        prompts = resolve_dataset(dataset)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    cfg["dataset"] = {"prompts_inline": [p.to_dict() for p in prompts]}

    if args.out_dir:
        cfg["out_dir"] = args.out_dir
    elif "out_dir" in cfg and not Path(cfg["out_dir"]).is_absolute():
        cfg["out_dir"] = str(base / cfg["out_dir"])
    if args.workers:
        cfg["workers"] = args.workers
    if args.seeds:
        cfg["seeds"] = [int(s) for s in args.seeds.split(",")]
    env = _env_seed()
    if env is not None:
        cfg["seeds"] = [env]
    return cfg


def cmd_batch(args, client: Client) -> int:
    req = schemas.BatchRequest(config=_experiment_payload(args))
    summary = client.call("/batch", req)
    print(f"wrote {len(summary['rows'])} runs to {summary['out_dir']}")
    print(f"summary: {summary['csv_path']}")
    if summary["failures"]:
        for failure in summary["failures"]:
            print(f"FAILED {failure['prompt_id']} seed={failure['seed']}: {failure['error']}",
                  file=sys.stderr)
        return RUN_FAILURE
    return 0


def cmd_ablate(args, client: Client) -> int:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    req = schemas.AblateRequest(config=_experiment_payload(args), variants=variants)
    result = client.call("/ablate", req)
    rows = result["rows"]
    if rows:
        columns = list(rows[0].keys())
        widths = [max(len(c), *(len(f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c]))
                                for r in rows)) for c in columns]
        print("  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip())
        for r in rows:
            cells = [f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c]) for c in columns]
            print("  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip())
    if any(r.get("failures") for r in rows):
        return RUN_FAILURE
    return 0


def cmd_gen_dataset(args, client: Client) -> int:
    try:
        vocab = load_vocabulary(args.vocab)
    except (OSError, json.JSONDecodeError, PromptError) as exc:
        raise UsageError(f"cannot read vocabulary {args.vocab}: {exc}") from exc
    env = _env_seed()
    req = schemas.DatasetRequest(
        template=args.template, vocabulary=vocab, seed=env if env is not None else args.seed
    )
    result = client.call("/datasets/expand", req)
    Path(args.out).write_text(json.dumps(result["prompts"], indent=2), encoding="utf-8")
    print(f"wrote {len(result['prompts'])} prompts to {args.out}")
    return 0


def cmd_gradcheck(args, client: Client) -> int:
    env = _env_seed()
    req = schemas.GradCheckRequest(
        trials=args.trials, h=args.h, tol=args.tol,
        seed=env if env is not None else args.seed,
    )
    report = client.call("/gradcheck", req)
    print(
        f"gradcheck: {report['n_passed']}/{report['trials']} passed "
        f"(h={report['h']:g}, tol={report['tol']:g}, "
        f"max_abs={report['max_abs_err']:.3e}, max_rel={report['max_rel_err']:.3e})"
    )
    return 0 if report["passed"] else RUN_FAILURE


def cmd_report(args, client: Client) -> int:
    if client.server is None or args.trajectories:
        try:
            print(local_report(args.csv, args.trajectories))
        except ReportError as exc:
            raise UsageError(str(exc)) from exc
        return 0
    try:
        csv_text = Path(args.csv).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {args.csv}: {exc}") from exc
    result = client.call("/report", schemas.ReportRequest(csv_text=csv_text))
    print(result["table"])
    return 0


def cmd_serve(args, client: Client) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="frap", description=__doc__)
    parser.add_argument("--server", help="base URL of a running service; default is in-process")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="one seeded generation")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--prompt", help="annotated markup, e.g. 'a [m1:red] [o1:car]'")
    group.add_argument("--prompt-file", help="JSON prompt spec file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=["frap", "vanilla", "static_weighting", "redo_timestep"])
    p.add_argument("--steps", type=int)
    p.add_argument("--t-end", dest="t_end", type=int)
    p.add_argument("--t-select", dest="t_select", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--static-phi", dest="static_phi", type=float)
    p.add_argument("--select", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--lam", type=float)
    p.add_argument("--presence-variant", dest="presence_variant")
    p.add_argument("--binding-variant", dest="binding_variant")
    p.add_argument("--out", help="write the run record JSON here")
    p.add_argument("--ppm", help="write the decoded image here (binary P6)")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("batch", help="run an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--workers", type=int)
    p.add_argument("--seeds", help="comma-separated seed list override")
    p.set_defaults(fn=cmd_batch)

    p = sub.add_parser("ablate", help="compare loop/objective variants")
    p.add_argument("--config", required=True)
    p.add_argument("--variants", default=",".join(ABLATION_VARIANTS))
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--workers", type=int)
    p.add_argument("--seeds", help="comma-separated seed list override")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gen-dataset", help="expand a prompt template")
    p.add_argument("--template", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen_dataset)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("report", help="render a summary CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--trajectories", help="also write per-run loss trajectories here")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    client = Client(args.server)
    try:
        return args.fn(args, client)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUN_FAILURE


if __name__ == "__main__":
    sys.exit(main())
