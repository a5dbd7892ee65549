"""Command-line harness: generate workloads, run policy matrices, report.

Run directories are flat and self-describing: per-policy ledgers, round
logs, per-task results, a shared sequential baseline, predictor checkpoints
and the metric CSVs. Simulation runs are bit-reproducible for a given
config and seed; nothing written here carries a timestamp.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import threading
import time
from typing import Any

import numpy as np
import yaml

from .agents import (
    ConfigError,
    EndpointConfig,
    GeneratorConfig,
    LiveBackend,
    SimBackend,
    TaskTrace,
    generate_tasks,
    workload_stats,
)
from .baselines import BOPolicy, DynamicPolicy, FixedKPolicy, SequentialPolicy
from .core import APPROX, TARGET, PlanState, PriceTable, write_jsonl
from .engine import (
    BaselineCosts,
    Engine,
    KPolicy,
    LiveScheduler,
    SimScheduler,
    TaskResult,
    sequential_baseline,
)
from .metrics import (
    MissingRun,
    accuracy_windows,
    cost_breakdown,
    load_baseline,
    load_policy_run,
    policy_report_row,
    write_accuracy_csv,
    write_breakdown_csv,
    write_report_csv,
    write_scatter_csv,
)
from .predictor import (
    AsyncTrainer,
    Hyperparams,
    SyncTrainer,
    ValueModel,
    save_checkpoint,
)

DEFAULT_DIMENSION = 1 << 16


def load_config(path: str, overrides: list[str] | None = None) -> dict:
    with open(path, encoding="utf-8") as f:
        cfg = yaml.safe_load(f) or {}
    for item in overrides or []:
        _apply_override(cfg, item)
    return cfg


def _apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key.path=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.split(".")
    node: Any = cfg
    for part in parts[:-1]:
        if isinstance(node, list):
            node = node[int(part)]
        else:
            node = node.setdefault(part, {})
    leaf = parts[-1]
    value = yaml.safe_load(raw)
    if isinstance(node, list):
        node[int(leaf)] = value
    else:
        node[leaf] = value


def _policy_name(entry: dict) -> str:
    if "name" in entry:
        return str(entry["name"])
    kind = entry.get("kind")
    if kind == "sequential":
        return "sequential"
    if kind == "fixed":
        return f"fixed-k{entry['k']}"
    if kind == "dynamic":
        return "dyn-tau{:g}".format(entry.get("tau", 0.5))
    if kind == "dynamic_offset":
        return "dyn-tau{:g}-b{}".format(entry.get("tau", 0.5), entry["beta"])
    if kind == "sft":
        return "sft"
    if kind == "bo":
        return "bo"
    raise ConfigError(f"unknown policy kind {kind!r}")


_HYPER_KEYS = (
    "tau",
    "lam",
    "gamma",
    "lr",
    "batch",
    "epochs",
    "buffer_capacity",
    "beta",
    "warmup_k",
    "include_censored",
)


def _hyper_for(entry: dict, defaults: dict) -> Hyperparams:
    merged = dict(defaults)
    for k in _HYPER_KEYS:
        if k in entry:
            merged[k] = entry[k]
    kind = entry.get("kind")
    if kind == "sft":
        merged["lam"] = 1.0
        merged["gamma"] = 1.0
    if kind == "dynamic_offset":
        merged["beta"] = entry["beta"]
    return Hyperparams(**{k: v for k, v in merged.items() if k in _HYPER_KEYS})


def build_policy(
    entry: dict, defaults: dict, dimension: int, seed: int, index: int
) -> tuple[KPolicy, SyncTrainer | None]:
    """Returns the policy and, for learned kinds, its trainer."""
    kind = entry.get("kind")
    name = _policy_name(entry)
    if kind == "sequential":
        return SequentialPolicy(name=name), None
    if kind == "fixed":
        return FixedKPolicy(int(entry["k"]), name=name), None
    if kind == "bo":
        bo_seed = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
        return (
            BOPolicy(
                k_max=int(entry.get("k_max", 6)),
                epsilon=float(entry.get("epsilon", 0.1)),
                seed=bo_seed,
                name=name,
            ),
            None,
        )
    if kind in ("dynamic", "dynamic_offset", "sft"):
        hyper = _hyper_for(entry, defaults)
        model = ValueModel(hyper, dimension)
        t_seed = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
        trainer = SyncTrainer(model, seed=t_seed)
        return DynamicPolicy(trainer.slot, name=name), trainer
    raise ConfigError(f"unknown policy kind {kind!r}")


def _load_workload(config: dict) -> tuple[list[TaskTrace], dict]:
    wl = config.get("workload") or {}
    path = wl.get("path")
    if path:
        with open(os.path.join(path, "manifest.json"), encoding="utf-8") as f:
            manifest = json.load(f)
        traces = [
            TaskTrace.load(os.path.join(path, "tasks", f"{tid}.json"))
            for tid in manifest["task_ids"]
        ]
        return traces, manifest.get("stats", {})
    gen = wl.get("generator")
    if gen is None:
        raise ConfigError("workload requires either a path or a generator section")
    traces = generate_tasks(GeneratorConfig.from_dict(gen))
    return traces, workload_stats(traces)


def cmd_gen(config: dict, out_dir: str) -> str:
    """Write the generated workload as one JSON trace per task plus a
    manifest with its optimal-k statistics."""
    wl = config.get("workload") or {}
    gen = wl.get("generator")
    if gen is None:
        raise ConfigError("cmd_gen needs workload.generator")
    traces = generate_tasks(GeneratorConfig.from_dict(gen))
    tasks_dir = os.path.join(out_dir, "tasks")
    os.makedirs(tasks_dir, exist_ok=True)
    for trace in traces:
        trace.save(os.path.join(tasks_dir, f"{trace.task_id}.json"))
    manifest = {
        "n_tasks": len(traces),
        "seed": gen.get("seed", 0),
        "task_ids": [t.task_id for t in traces],
        "stats": workload_stats(traces),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
    return out_dir


def run_policy_sim(
    policy: KPolicy,
    trainer: SyncTrainer | None,
    traces: list[TaskTrace],
    predictor_latency_ms: int = 0,
) -> tuple[list[dict], list[dict], list[dict]]:
    """Execute one policy over the whole workload on the virtual clock.

    Returns (ledger rows, round rows, per-task result rows); round ids are
    globally increasing so rows can be attributed to tasks downstream.
    """
    ledger_rows: list[dict] = []
    round_rows: list[dict] = []
    result_rows: list[dict] = []
    next_round_id = 0
    for trace in traces:
        scheduler = SimScheduler(SimBackend(trace))
        engine = Engine(
            scheduler,
            policy,
            predictor_latency_ms=predictor_latency_ms,
            first_round_id=next_round_id,
        )
        result = engine.run_task(trace.task_id, trace.task_prompt, len(trace.steps))
        next_round_id = engine.next_round_id
        ledger_rows.extend(r.to_dict() for r in result.ledger)
        round_rows.extend(r.to_dict() for r in result.rounds)
        result_rows.append(
            {
                "task_id": trace.task_id,
                "total_ms": result.total_time_ms,
                "first_round_id": result.rounds[0].round_id if result.rounds else next_round_id,
                "n_rounds": len(result.rounds),
            }
        )
        if trainer is not None:
            trainer.ingest(result.runs)
    return ledger_rows, round_rows, result_rows


def cmd_run(config: dict, out_dir: str, seed: int | None = None) -> str:
    """Run the configured policy matrix over the workload in sim mode."""
    traces, stats = _load_workload(config)
    run_seed = int(config.get("seed", 0)) if seed is None else seed
    defaults = config.get("predictor") or {}
    dimension = int(defaults.get("dimension", DEFAULT_DIMENSION))
    hyper_defaults = {k: v for k, v in defaults.items() if k in _HYPER_KEYS}
    predictor_latency_ms = int(config.get("predictor_latency_ms", 0))
    entries = config.get("policies") or []
    if not entries:
        raise ConfigError("config lists no policies")
    names = [_policy_name(e) for e in entries]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate policy names in config: {names}")

    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)

    baseline_rows = []
    for trace in traces:
        base = sequential_baseline(trace.steps)
        baseline_rows.append({"task_id": trace.task_id, **base.to_dict()})
    write_jsonl(os.path.join(out_dir, "baseline.jsonl"), baseline_rows)

    for index, entry in enumerate(entries):
        policy, trainer = build_policy(entry, hyper_defaults, dimension, run_seed, index)
        ledger_rows, round_rows, result_rows = run_policy_sim(
            policy, trainer, traces, predictor_latency_ms
        )
        write_jsonl(os.path.join(out_dir, f"ledger-{policy.name}.jsonl"), ledger_rows)
        write_jsonl(os.path.join(out_dir, f"rounds-{policy.name}.jsonl"), round_rows)
        write_jsonl(os.path.join(out_dir, f"results-{policy.name}.jsonl"), result_rows)
        if trainer is not None:
            save_checkpoint(trainer.model, os.path.join(ckpt_dir, f"{policy.name}.json"))
            trainer.buffer.dump_jsonl(os.path.join(ckpt_dir, f"{policy.name}-buffer.jsonl"))
            ranges = [(r["first_round_id"], r["n_rounds"]) for r in result_rows]
            write_accuracy_csv(
                os.path.join(out_dir, f"accuracy-{policy.name}.csv"),
                accuracy_windows(round_rows, ranges),
            )
        if isinstance(policy, BOPolicy):
            with open(os.path.join(ckpt_dir, f"{policy.name}-arms.json"), "w") as f:
                json.dump(policy.stats.to_dict(), f, indent=1)

    manifest = {
        "mode": "sim",
        "seed": run_seed,
        "n_tasks": len(traces),
        "task_ids": [t.task_id for t in traces],
        "policies": names,
        "stats": stats,
        "prices": config.get("prices") or {},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
    return out_dir


def cmd_report(run_dir: str, reference: str = "fixed-k2", out_path: str | None = None) -> str:
    """Assemble report.csv, breakdown.csv and scatter.csv for a finished
    run directory."""
    manifest_path = os.path.join(run_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise MissingRun(f"manifest.json not found in {run_dir}")
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    prices = PriceTable(**manifest.get("prices", {})) if manifest.get("prices") else PriceTable()
    policies = manifest["policies"]
    if reference not in policies:
        raise MissingRun(f"reference policy {reference!r} not in this run: {policies}")
    baseline = load_baseline(run_dir)
    runs = {p: load_policy_run(run_dir, p) for p in policies}
    ref = runs[reference]

    report_rows = [policy_report_row(runs[p], baseline, ref, prices) for p in policies]
    report_path = out_path or os.path.join(run_dir, "report.csv")
    write_report_csv(report_path, report_rows)
    if out_path:
        write_report_csv(os.path.join(run_dir, "report.csv"), report_rows)

    normal = baseline
    entries = [(p, cost_breakdown(runs[p].tasks, normal)) for p in policies]
    write_breakdown_csv(os.path.join(run_dir, "breakdown.csv"), entries)
    write_scatter_csv(os.path.join(run_dir, "scatter.csv"), report_rows)
    with open(os.path.join(run_dir, "report.json"), "w", encoding="utf-8") as f:
        json.dump(report_rows, f, indent=1)
    return report_path


def _live_target_pass(
    backend: LiveBackend, cfg: EndpointConfig, task_id: str, prompt: str
) -> tuple[BaselineCosts, list[PlanState]]:
    """Target-only sequential reference: wall time plus target token sums,
    and the visited states so the approx pass can replay them."""
    state = PlanState(prompt)
    states: list[PlanState] = []
    base = BaselineCosts()
    t0 = time.monotonic()
    for _ in range(cfg.max_steps):
        states.append(state)
        res = backend.complete(TARGET, state, threading.Event())
        base.target_prompt += res.prompt_tokens or 0
        base.target_gen += res.gen_tokens or 0
        time.sleep(cfg.exec_latency_ms / 1000.0)
        state = state.append(res.action, cfg.observation_text)
        if res.action.text == cfg.stop_marker:
            break
    base.time_ms = int((time.monotonic() - t0) * 1000)
    return base, states


def _live_approx_pass(backend: LiveBackend, base: BaselineCosts, states: list[PlanState]) -> None:
    for state in states:
        res = backend.complete(APPROX, state, threading.Event())
        base.approx_prompt += res.prompt_tokens or 0
        base.approx_gen += res.gen_tokens or 0


def cmd_live(config: dict, out_dir: str) -> str:
    """Run the policy matrix against a live endpoint.

    Artifacts match sim runs; times are wall-clock and token counts come
    from the API usage fields. The sequential baseline is measured by a
    dedicated target-only pass, then an approx-only replay of the same
    states fills in the two-agent token reference.
    """
    ep = config.get("endpoint")
    if not ep:
        raise ConfigError("live mode requires an endpoint section")
    cfg = EndpointConfig.from_dict(ep)
    backend = LiveBackend(cfg)
    tasks = config.get("live_tasks") or []
    if not tasks:
        raise ConfigError("live mode requires live_tasks")
    run_seed = int(config.get("seed", 0))
    defaults = config.get("predictor") or {}
    dimension = int(defaults.get("dimension", DEFAULT_DIMENSION))
    hyper_defaults = {k: v for k, v in defaults.items() if k in _HYPER_KEYS}
    entries = config.get("policies") or []
    if not entries:
        raise ConfigError("config lists no policies")
    names = [_policy_name(e) for e in entries]

    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)

    baseline_rows = []
    states_by_task: dict[str, list[PlanState]] = {}
    for task in tasks:
        base, states = _live_target_pass(backend, cfg, task["task_id"], task["prompt"])
        _live_approx_pass(backend, base, states)
        states_by_task[task["task_id"]] = states
        baseline_rows.append({"task_id": task["task_id"], **base.to_dict()})
    write_jsonl(os.path.join(out_dir, "baseline.jsonl"), baseline_rows)

    for index, entry in enumerate(entries):
        policy, sync_trainer = build_policy(entry, hyper_defaults, dimension, run_seed, index)
        trainer = None
        if sync_trainer is not None:
            trainer = AsyncTrainer(
                sync_trainer.model, seed=run_seed + index, slot=sync_trainer.slot
            )
        ledger_rows: list[dict] = []
        round_rows: list[dict] = []
        result_rows: list[dict] = []
        next_round_id = 0
        for task in tasks:
            scheduler = LiveScheduler(backend, cfg)
            engine = Engine(
                scheduler,
                policy,
                stop_marker=cfg.stop_marker,
                first_round_id=next_round_id,
            )
            result = engine.run_task(task["task_id"], task["prompt"], cfg.max_steps)
            next_round_id = engine.next_round_id
            ledger_rows.extend(r.to_dict() for r in result.ledger)
            round_rows.extend(r.to_dict() for r in result.rounds)
            result_rows.append(
                {
                    "task_id": task["task_id"],
                    "total_ms": result.total_time_ms,
                    "first_round_id": result.rounds[0].round_id if result.rounds else next_round_id,
                    "n_rounds": len(result.rounds),
                }
            )
            if trainer is not None:
                trainer.ingest(result.runs)
        if trainer is not None:
            trainer.close()
            save_checkpoint(trainer.model, os.path.join(ckpt_dir, f"{policy.name}.json"))
        write_jsonl(os.path.join(out_dir, f"ledger-{policy.name}.jsonl"), ledger_rows)
        write_jsonl(os.path.join(out_dir, f"rounds-{policy.name}.jsonl"), round_rows)
        write_jsonl(os.path.join(out_dir, f"results-{policy.name}.jsonl"), result_rows)

    manifest = {
        "mode": "live",
        "seed": run_seed,
        "n_tasks": len(tasks),
        "task_ids": [t["task_id"] for t in tasks],
        "policies": names,
        "stats": {},
        "prices": config.get("prices") or {},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
    return out_dir


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="specplan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic workload")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--set", action="append", dest="overrides", default=[])

    p_run = sub.add_parser("run", help="run the policy matrix in simulation")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--set", action="append", dest="overrides", default=[])

    p_rep = sub.add_parser("report", help="compute metrics for a run directory")
    p_rep.add_argument("--run", required=True)
    p_rep.add_argument("--reference", default="fixed-k2")
    p_rep.add_argument("--out", default=None)

    p_live = sub.add_parser("live", help="run against a live endpoint")
    p_live.add_argument("--config", required=True)
    p_live.add_argument("--out", required=True)
    p_live.add_argument("--set", action="append", dest="overrides", default=[])

    args = parser.parse_args(argv)
    try:
        if args.command == "gen":
            out = cmd_gen(load_config(args.config, args.overrides), args.out)
        elif args.command == "run":
            out = cmd_run(load_config(args.config, args.overrides), args.out, args.seed)
        elif args.command == "report":
            out = cmd_report(args.run, args.reference, args.out)
        else:
            out = cmd_live(load_config(args.config, args.overrides), args.out)
    except (ConfigError, MissingRun) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
