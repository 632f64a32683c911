"""Command-line entry point. Every command writes machine-readable output
(CSV or JSON lines) to ``--out`` or stdout.
"""
from __future__ import annotations

import argparse
import sys
from contextlib import contextmanager
from pathlib import Path

from . import bench, invariants
from .annealing import AnnealSchedule
from .attention import AttentionConfig
from .errors import DivergenceError, EspError
from .model import SyntheticTask, TinyModel, grad_check, train
from .runconfig import ATTENTION_KINDS, COMMANDS, RunConfig, convert, default_threads, parse_pairs

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INVARIANT = 3
EXIT_DIVERGENCE = 4

ANNEAL_DEFAULT_START = 1e-2
ANNEAL_DEFAULT_EPOCHS = 40


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="espattn", description="ESP attention kernels: benchmarks, checks and demos.")
    p.add_argument("--command", choices=COMMANDS)
    p.add_argument("--config", help="flat key=value file; flags override it")
    p.add_argument("--attention", choices=ATTENTION_KINDS)
    p.add_argument("--n", help="token count, or a comma list for bench")
    p.add_argument("--m", help="query/key feature dimension")
    p.add_argument("--d", help="value dimension")
    p.add_argument("--slices", help="number of frozen random slices (default: axis-aligned)")
    p.add_argument("--sort-temp", help="SoftSort temperature t")
    p.add_argument("--sort-mode", choices=("soft", "hard"))
    p.add_argument("--tau", help="inverse temperature, or a comma list for plan-dump")
    p.add_argument("--epsilon", help="Sinkhorn entropic regularisation")
    p.add_argument("--iters", help="Sinkhorn iterations S, or a comma list")
    p.add_argument("--lam", help="differential attention lambda")
    p.add_argument("--seed")
    p.add_argument("--repeats")
    p.add_argument("--warmup")
    p.add_argument("--threads", help="worker count (default: $ESP_THREADS or 1)")
    p.add_argument("--epochs")
    p.add_argument("--lr")
    p.add_argument("--gamma")
    p.add_argument("--initial-temp")
    p.add_argument("--hidden")
    p.add_argument("--batch-size")
    p.add_argument("--out", help="output path, '-' for stdout")
    return p


def resolve_config(argv=None) -> RunConfig:
    args = build_parser().parse_args(argv)
    values = {"threads": default_threads()}
    if args.config:
        values.update(parse_pairs(Path(args.config).read_text()))
    for key, raw in vars(args).items():
        if key == "config" or raw is None:
            continue
        value = convert(key, raw) if isinstance(raw, str) else raw
        if value is not None:
            values[key] = value
    values.setdefault("command", "invariants")
    return RunConfig(**values)


@contextmanager
def _output(path: str):
    if path == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _first(values, default):
    return values[0] if values else default


def attention_config(cfg: RunConfig, **defaults) -> AttentionConfig:
    base = AttentionConfig(**defaults)
    changes = {}
    if cfg.sort_temp is not None:
        changes["sort_temperature"] = cfg.sort_temp
    if cfg.sort_mode is not None:
        changes["sort_mode"] = cfg.sort_mode
    if cfg.tau:
        changes["inverse_temperature"] = cfg.tau[0]
    if cfg.epsilon is not None:
        changes["sinkhorn_epsilon"] = cfg.epsilon
    if cfg.iters:
        changes["sinkhorn_iters"] = cfg.iters[0]
    if cfg.lam is not None:
        changes["lam"] = cfg.lam
    if cfg.slices is not None:
        changes.update(slicer="frozen_random", n_slices=cfg.slices, slicer_seed=cfg.seed)
    changes["workers"] = cfg.threads
    return base.with_(**changes)


def cmd_bench(cfg: RunConfig, out) -> int:
    methods = (cfg.attention,) if cfg.attention else ("softmax", "diff", "sinkhorn", "esp")
    rows = bench.run_bench(
        ns=cfg.get("n", bench.DEFAULT_BENCH_N), m=cfg.get("m", 8), d=cfg.get("d", 1024),
        iters=cfg.get("iters", bench.DEFAULT_BENCH_ITERS), repeats=cfg.get("repeats", 10),
        warmup=cfg.warmup, threads=cfg.threads, base=attention_config(cfg), methods=methods, seed=cfg.seed)
    bench.write_csv([r.as_dict() for r in rows], bench.BENCH_FIELDS, out)
    return EXIT_OK


def cmd_plan_dump(cfg: RunConfig, out) -> int:
    n = _first(cfg.n, 16)
    if n > 64:
        raise EspError("plan-dump is limited to N <= 64")
    base = attention_config(cfg, sort_mode="hard")
    rows = bench.plan_dump(n, cfg.seed, cfg.get("tau", bench.DEFAULT_DUMP_TAUS),
                           cfg.get("iters", bench.DEFAULT_DUMP_ITERS), base)
    bench.write_csv(rows, bench.DUMP_FIELDS, out)
    return EXIT_OK


def cmd_invariants(cfg: RunConfig, out) -> int:
    records = invariants.run_all(cfg.seed)
    out.write(invariants.to_jsonl(records))
    return EXIT_OK if all(r["status"] == "pass" for r in records) else EXIT_INVARIANT


def _model(cfg: RunConfig) -> TinyModel:
    acfg = attention_config(cfg, sort_temperature=0.1, inverse_temperature=1.0)
    return TinyModel.init(cfg.attention or "esp", d=cfg.get("d", 8), m=cfg.get("m", 4),
                          hidden=cfg.get("hidden", 16), cfg=acfg, seed=cfg.seed)


def _task(cfg: RunConfig) -> SyntheticTask:
    return SyntheticTask(n_points=_first(cfg.n, 16), dim=cfg.get("d", 8), seed=cfg.seed)


def cmd_gradcheck(cfg: RunConfig, out) -> int:
    records = list(invariants.esp_gradients(cfg.seed, cases=cfg.get("repeats", 10)))
    model = _model(cfg.merged({"sort_mode": "soft"}) if cfg.sort_mode is None else cfg)
    report = grad_check(model, tolerance=1e-3)
    records.append(invariants.record("model_gradient", f"{model.kind} all parameters",
                                     report.passed, report.max_rel_error, report.tolerance))
    out.write(invariants.to_jsonl(records))
    return EXIT_OK if all(r["status"] == "pass" for r in records) else EXIT_INVARIANT


def cmd_train(cfg: RunConfig, out) -> int:
    model = _model(cfg)
    report = train(model, _task(cfg), epochs=cfg.get("epochs", 200), lr=cfg.get("lr", 0.5),
                   batch_size=cfg.get("batch_size", 16))
    out.write(report.to_csv())
    return EXIT_OK


def cmd_anneal_demo(cfg: RunConfig, out) -> int:
    model = _model(cfg.merged({"attention": cfg.attention or "esp"}))
    schedule = AnnealSchedule(initial_temperature=cfg.get("initial_temp", ANNEAL_DEFAULT_START),
                              gamma=cfg.get("gamma", 0.8))
    report = train(model, _task(cfg), epochs=cfg.get("epochs", ANNEAL_DEFAULT_EPOCHS), schedule=schedule,
                   lr=cfg.get("lr", 0.5), batch_size=cfg.get("batch_size", 16), log_hard_eval=True)
    out.write(report.to_csv())
    return EXIT_OK


HANDLERS = {
    "bench": cmd_bench,
    "plan-dump": cmd_plan_dump,
    "invariants": cmd_invariants,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "anneal-demo": cmd_anneal_demo,
}


def main(argv=None) -> int:
    try:
        cfg = resolve_config(argv)
    except (EspError, OSError) as exc:
        print(f"espattn: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    try:
        with _output(cfg.out) as out:
            return HANDLERS[cfg.command](cfg, out)
    except DivergenceError as exc:
        print(f"espattn: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except EspError as exc:
        print(f"espattn: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
