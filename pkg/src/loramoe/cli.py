"""Command line entry point: ``loramoe {run,list-specs,gradcheck,verify-routing,param-report}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import data as D
from . import experiments as X
from . import layers as L
from . import verify as V


def _print_checks(results) -> int:
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failed += not ok
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 1


def cmd_list_specs(args) -> int:
    for name, spec in X.built_in_specs().items():
        f = spec.fixed
        print(f"{name:13s} {spec.protocol:13s} {spec.swept}={list(spec.sweep)} depth={f.depth} "
              f"hidden={f.hidden} N={f.n_experts} r={f.rank} alpha={f.alpha} top_k={f.top_k} "
              f"reps={spec.repetitions}")
    return 0


def _data_path(cfg: X.RunConfig, override: str | None) -> Path:
    path = override or cfg.data_path or os.environ.get(X.DATA_ENV)
    if not path:
        raise SystemExit(f"no data path: set data_path in the config, pass --data, or export {X.DATA_ENV}")
    return Path(path)


def cmd_run(args) -> int:
    cfg = X.load_config(args.config)
    data = D.load_darwin(_data_path(cfg, args.data))
    table = X.run(cfg.spec, data)
    out = args.out or cfg.out_path
    if out:
        X.emit(table, cfg.out_format, out)
        print(f"wrote {out}")
        if args.efficiency:
            X.emit_efficiency(table, args.efficiency)
    else:
        sys.stdout.write(X.to_csv(table) if cfg.out_format == "CSV" else X.to_json(table))
    return 0


def cmd_param_report(args) -> int:
    cfg = X.load_config(args.config)
    spec = cfg.spec
    input_dim = 18 if spec.protocol in ("TASK_LEVEL", "VOTE_BY_TASK") else 450
    rows = []
    for arch in spec.architectures:
        for k, value in enumerate(spec.sweep):
            kw = spec.model_kwargs(value)
            model = L.build_model(arch, input_dim, kw["hidden"], kw["depth"], n_experts=kw["n_experts"],
                                  rank=kw["rank"], alpha=kw["alpha"], top_k=kw["top_k"])
            rep = L.param_report(model)
            ident = V.check_param_identity(model)
            rows.append({
                "arch": X.ARCH_LABEL[arch], "model": f"BL_{k + 1}", spec.swept: value,
                "total": rep.total, "total_without_bias": rep.total_without_bias,
                "activated_per_sample": rep.activated_per_sample,
                "reduction_vs_moe": rep.reduction_vs_moe, "identity_ok": ident.passed,
            })
    if args.json:
        print(json.dumps(rows, indent=2))
    else:
        keys = list(rows[0])
        print(",".join(keys))
        for r in rows:
            print(",".join(str(r[k]) for k in keys))
    return 0 if all(r["identity_ok"] for r in rows) else 1


def cmd_gradcheck(args) -> int:
    return _print_checks(V.gradcheck_suite(seed=args.seed, epsilon=args.epsilon, tol=args.tol))


def cmd_verify_routing(args) -> int:
    return _print_checks(V.routing_suite(seed=args.seed, n_midpoints=args.midpoints))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="loramoe", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config (YAML or JSON)")
    r.add_argument("config")
    r.add_argument("--data", help=f"DARWIN CSV (default: config data_path or ${X.DATA_ENV})")
    r.add_argument("--out", help="output file (overrides out.path)")
    r.add_argument("--efficiency", help="also write accuracy/time efficiency CSV here")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("list-specs", help="list the built-in experiment specs")
    s.set_defaults(func=cmd_list_specs)

    g = sub.add_parser("gradcheck", help="finite-difference check of every model family")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--epsilon", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)

    v = sub.add_parser("verify-routing", help="convexity and Voronoi checks of Top-1 routing")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--midpoints", type=int, default=10_000, help="same-region midpoints tested per gate")
    v.set_defaults(func=cmd_verify_routing)

    pr = sub.add_parser("param-report", help="parameter counts for every model a config builds")
    pr.add_argument("config")
    pr.add_argument("--json", action="store_true")
    pr.set_defaults(func=cmd_param_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
