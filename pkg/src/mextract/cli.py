"""Command line: run | replay | report | retro-diff | serve.

Exit codes: 0 success, 2 config error, 3 budget exhausted mid-run,
4 backend or other runtime error.
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from pathlib import Path

from .errors import BudgetExhausted, ConfigError, ExtractionError, RoundError

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_BACKEND = 0, 2, 3, 4


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text + ("" if text.endswith("\n") else "\n"))
    else:
        print(text)


def cmd_run(args: argparse.Namespace, replay: bool = False) -> int:
    from .config import load_config
    from .harness import emit_report, run_experiment
    from .oracle import ResponseCache

    cfg = load_config(args.config)
    cache_path = getattr(args, "cache", None) or cfg.cache_path
    if replay and not cache_path:
        raise ConfigError("replay needs a cache (--cache or cache_path in the config)")
    result = run_experiment(cfg, cache=ResponseCache(cache_path), replay=replay)
    _write(emit_report(result, args.format), args.output)
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    from .harness import emit_report, load_result

    results = []
    for path in args.results:
        results.extend(load_result(path))
    _write(emit_report(results, args.format), args.output)
    return EXIT_OK


def cmd_retro_diff(args: argparse.Namespace) -> int:
    from .retro import diff_report, ingest_snapshot, snapshot_diff

    a = ingest_snapshot(args.year_a, args.num_classes)
    b = ingest_snapshot(args.year_b, args.num_classes)
    _write(diff_report(snapshot_diff(a, b), args.fidelity_delta), args.output)
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    from .config import load_gateway_config
    from .data import load_dataset
    from .gateway import ApiKeyAccount, serve
    from .harness import load_victim, split_dataset
    from .oracle import Budget, Oracle, QueryLog, ResponseCache, ResponsePolicy

    cfg = load_gateway_config(args.config)
    data = load_dataset(cfg.victim.dataset)
    ref, _ = split_dataset(data, cfg.split_fraction, cfg.split_seed)
    victim = load_victim(cfg.victim, data.subset(ref))
    oracle = Oracle(
        victim,
        Budget(cfg.budget.batches, cfg.budget.batch_size),
        cache=ResponseCache(cfg.cache_path),
        log=QueryLog(cfg.log_path),
        eval_budget=Budget(cfg.eval_budget.batches, cfg.eval_budget.batch_size),
    )
    accounts = [ApiKeyAccount(a.key, ResponsePolicy.from_dict(a.policy), a.rate_limit, a.burst) for a in cfg.accounts]
    handle = serve(oracle, cfg.address, accounts)
    print(f"serving {handle.url}", flush=True)
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        stop.wait()
    except KeyboardInterrupt:
        pass
    handle.shutdown()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mextract", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    for name in ("run", "replay"):
        s = sub.add_parser(name, help=f"{name} an experiment config")
        s.add_argument("config")
        if name == "replay":
            s.add_argument("--cache", help="response cache to replay from (defaults to cache_path)")
        s.add_argument("--format", default="json", choices=["json", "csv", "table"])
        s.add_argument("-o", "--output")

    s = sub.add_parser("report", help="render saved results")
    s.add_argument("results", nargs="+")
    s.add_argument("--format", default="table")
    s.add_argument("-o", "--output")

    s = sub.add_parser("retro-diff", help="compare two yearly snapshots")
    s.add_argument("year_a")
    s.add_argument("year_b")
    s.add_argument("--num-classes", type=int)
    s.add_argument("--fidelity-delta", type=float)
    s.add_argument("-o", "--output")

    s = sub.add_parser("serve", help="run the mock MLaaS gateway")
    s.add_argument("config")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handlers = {
        "run": cmd_run,
        "replay": lambda a: cmd_run(a, replay=True),
        "report": cmd_report,
        "retro-diff": cmd_retro_diff,
        "serve": cmd_serve,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (BudgetExhausted, RoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return getattr(e, "exit_code", EXIT_BACKEND)
    except ExtractionError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:  # backend failures (torch, I/O)
        print(f"backend error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
