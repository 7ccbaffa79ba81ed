"""
cli/main.py
───────────
Command-line front end.

    python qms.py --scenario data/scenarios/depolarizing_m2.json --out results/

Exit codes: 0 success, 2 validation failure, 3 solver non-convergence,
4 scenario schema error. QMS_THREADS sets the worker count.
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from shared import config
from shared.errors import QmsError, ScenarioError
from cli.scenario import build_options, build_structure, build_theta, load_scenario
from cli.commands import COMMANDS, RunContext, bundle

logger = logging.getLogger("QMS")


def parse_args(argv=None):
    p = argparse.ArgumentParser(prog="qms", description="Transport calculus for quantum Markov semigroups")
    p.add_argument("--scenario", required=True, help="scenario JSON file")
    p.add_argument("--seed", type=int, default=None, help="overrides the scenario seed")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--allow-nonconvex", action="store_true", help="run the distance solver on non-convex θ")
    p.add_argument("--dump-normalized", action="store_true", help="print the normalized scenario and exit")
    p.add_argument("--tol-override", action="append", default=[], metavar="KEY=VAL",
                   help="override a tolerance in shared.config")
    p.add_argument("-v", "--verbose", action="store_true")
    return p.parse_args(argv)


def apply_overrides(pairs):
    for item in pairs:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or not key.isupper() or not hasattr(config, key):
            raise ScenarioError(f"--tol-override: unknown key {key!r}")
        current = getattr(config, key)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ScenarioError(f"--tol-override {key}: cannot parse {raw!r}") from e
        if isinstance(current, tuple):
            value = tuple(value)
        elif isinstance(current, float):
            value = float(value)
        elif isinstance(current, int):
            value = int(value)
        setattr(config, key, value)
        logger.info("override %s = %r", key, value)


def run(args) -> int:
    apply_overrides(args.tol_override)
    scn = load_scenario(args.scenario)
    if args.dump_normalized:
        print(json.dumps(scn.normalized(), indent=2, sort_keys=True))
        return 0

    seed = scn.seed if args.seed is None else args.seed
    ds = build_structure(scn)
    out_dir = args.out or scn.output.dir or os.path.join(config.RESULTS_DIR, ds.name)
    ctx = RunContext(scn, ds, build_theta(scn, ds), build_options(scn, args.allow_nonconvex), out_dir, seed)
    logger.info("structure %s: %d directions, dim %d", ds.name, len(ds.directions), ds.algebra.dim)

    keys = [f"{t.name or t.command}_{i}" for i, t in enumerate(scn.tasks)]
    if not ds.validated:
        for key, task in zip(keys, scn.tasks):
            if task.command == "validate":
                COMMANDS["validate"](ctx, task, key)
        failed = ", ".join(r.axiom for r in ds.report.failures())
        logger.error("structure failed validation: %s", failed)
        return 2

    results, codes = {}, []

    def execute(pair):
        key, task = pair
        try:
            return key, COMMANDS[task.command](ctx, task, key), 0
        except QmsError as e:
            logger.error("%s: %s", key, e)
            return key, {"error": str(e)}, e.exit_code

    with ThreadPoolExecutor(max_workers=config.QMS_THREADS) as pool:
        for key, payload, code in pool.map(execute, zip(keys, scn.tasks)):
            results[key] = payload
            codes.append(code)

    ctx.write_json("bundle.json", bundle(ctx, results).model_dump(mode="json"))
    return max(codes, default=0)


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )
    try:
        return run(args)
    except QmsError as e:
        logger.error("%s", e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
