"""Command-line front end: ``matrel --script query.mr``."""
from __future__ import annotations

import argparse
import json
import os
import sys

from .cost import Scheme, assign_schemes
from .dist import DEFAULT_ENTRY_BUDGET, Cluster
from .dsl import Explain, parse_script
from .errors import MatRelError
from .executor import Executor, describe, stats
from .io import load_matrix, save_value
from .plan import Cross, EWise, Join, JoinGamma, infer_meta, show, walk
from .rewriter import FAMILIES, RewriteTrace, format_trace, optimize

ENV_BLOCK_SIZE = "MATREL_BLOCK_SIZE"


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _rules(text: str):
    t = text.strip()
    if t.lower() in ("", "none"):
        return ()
    if t.lower() == "all":
        return FAMILIES
    names = tuple(x.strip() for x in t.split(",") if x.strip())
    lookup = {f.lower(): f for f in FAMILIES}
    bad = [n for n in names if n.lower() not in lookup]
    if bad:
        raise argparse.ArgumentTypeError(
            f"unknown rule families {', '.join(bad)}; choose from {', '.join(FAMILIES)}")
    return tuple(lookup[n.lower()] for n in names)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="matrel",
                                description="Run matrix queries on a simulated cluster.")
    p.add_argument("--script", required=True, help="query script to run")
    p.add_argument("--workers", type=int, default=4, help="number of workers (default 4)")
    p.add_argument("--block-size", type=int, default=None,
                   help=f"block side L (default ${ENV_BLOCK_SIZE} or 1000)")
    p.add_argument("--no-opt", action="store_true", help="skip the rewrite optimizer")
    p.add_argument("--rules", type=_rules, default=None,
                   help="comma-separated rule families to enable")
    p.add_argument("--stats", default=None, help="write a JSON run report here")
    p.add_argument("--explain", action="store_true",
                   help="print plans, rewrites and costs without running anything")
    p.add_argument("--seed", type=int, default=0, help="seed for placement and sampling")
    p.add_argument("--entry-budget", type=int, default=DEFAULT_ENTRY_BUDGET,
                   help="largest join output, in entries")
    p.add_argument("--assume-no-cancellation", type=_bool, default=True,
                   help="allow nnz rewrites that assume sums never cancel (default true)")
    p.add_argument("--parallel", action="store_true",
                   help="run workers on a thread pool (results are identical)")
    return p


def _block_size(args) -> int:
    if args.block_size is not None:
        return args.block_size
    env = os.environ.get(ENV_BLOCK_SIZE)
    if env:
        try:
            return int(env)
        except ValueError:
            raise MatRelError(f"{ENV_BLOCK_SIZE} must be an integer, got {env!r}") from None
    return 1000


def _resolve(path: str, base: str) -> str:
    if os.path.isabs(path) or os.path.exists(path):
        return path
    return os.path.join(base, path)


def _plan_for(expr, catalog, args):
    if args.no_opt:
        return infer_meta(expr, catalog), RewriteTrace()
    return optimize(expr, enable=args.rules, catalog=catalog,
                    assume_no_cancellation=args.assume_no_cancellation)


def _cost_lines(plan, cluster: Cluster) -> list:
    out = []
    cfg = cluster.config()
    for path, node in walk(plan):
        if isinstance(node, (Join, Cross)):
            gamma = node.gamma if isinstance(node, Join) else JoinGamma(())
            kind, label = gamma.kind, f"join[{str(gamma) or 'cross'}]"
        elif isinstance(node, EWise):
            gamma, kind, label = None, "overlay_direct", f"ewise[{node.op}]"
        else:
            continue
        a, b = node.left.meta, node.right.meta
        if a is None or b is None:
            continue
        size_a = a.nnz if a.sparse else a.size
        size_b = b.nnz if b.sparse else b.size
        cur = tuple(Scheme.RANDOM if type(k).__name__ == "Leaf" else Scheme.ROW
                    for k in (node.left, node.right))
        est = assign_schemes(kind, gamma, float(size_a), float(size_b), cur, cfg)
        out.append(f"  /{'/'.join(map(str, path))} {label}: schemes "
                   f"({est.scheme_a.value},{est.scheme_b.value}) via {est.strategy}; "
                   f"join {est.join_cost:g} + convert {est.conv_a:g} + {est.conv_b:g} "
                   f"= {est.total:g} entries")
    return out


def run(args, out=None) -> int:
    out = out or sys.stdout
    with open(args.script) as fh:
        script = parse_script(fh.read(), seed=args.seed)
    base = os.path.dirname(os.path.abspath(args.script))
    L = _block_size(args)
    cluster = Cluster(args.workers, L, parallel=args.parallel, seed=args.seed,
                      entry_budget=args.entry_budget, masked_products=not args.no_opt)
    try:
        env = {}
        for i, (name, (path, fmt)) in enumerate(sorted(script.loads.items())):
            env[name] = load_matrix(_resolve(path, base), fmt, L, args.workers,
                                    seed=args.seed + i)
        catalog = {k: v.meta_info() for k, v in env.items()}
        executor = Executor(env, cluster)
        trace_all, last = [], None
        plans = {}
        for st in script.targets():
            if st.name not in plans:
                plans[st.name] = _plan_for(script.defs[st.name], catalog, args)
            plan, trace = plans[st.name]
            if isinstance(st, Explain) or args.explain:
                print(f"== {st.name}", file=out)
                print(f"logical:   {show(script.defs[st.name])}", file=out)
                print(f"optimized: {show(plan)}", file=out)
                print("rewrites:", file=out)
                print("  " + format_trace(trace).replace("\n", "\n  "), file=out)
                lines = _cost_lines(plan, cluster)
                print("costs:" if lines else "costs: no join or element-wise operators", file=out)
                for line in lines:
                    print(line, file=out)
            if args.explain or isinstance(st, Explain):
                continue
            value = executor.eval(plan)
            trace_all.extend(trace.steps)
            last = value
            kind = save_value(st.path, value)
            print(f"saved {st.name} ({kind}, {describe(value)}) to {st.path}", file=out)
        if args.stats and not args.explain:
            t = RewriteTrace()
            t.steps.extend(trace_all)
            report = stats(cluster.ledger, t, last, executor.join_estimates)
            with open(args.stats, "w") as fh:
                json.dump(report, fh, indent=2, default=_jsonable)
    finally:
        cluster.close()
    return 0


def _jsonable(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    return str(o)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.workers < 1:
        parser.error("--workers must be at least 1")
    try:
        return run(args)
    except (MatRelError, OSError) as err:
        print(f"matrel: error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
