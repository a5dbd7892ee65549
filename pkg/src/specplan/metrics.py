"""Metrics over completed runs: savings, ratios, concurrency, waste.

Percent deltas are means of per-task quantities against that task's
sequential realization; the (x) ratios divide aggregate totals against a
reference policy's totals. The redundant-cost breakdown reconciles actual
spend against the two-agent sequential plan, with a per-call census
attributing every wasted token to one of four components.

All functions are pure over loaded rows; loading helpers at the bottom read
the run-directory layout written by the bench.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .core import APPROX, PriceTable, read_jsonl
from .engine import MISMATCH, BaselineCosts


class LengthMismatch(ValueError):
    """Paired per-task lists have different lengths."""


class MissingRun(RuntimeError):
    """A run directory lacks the files for the requested policy."""


def _paired(sp: list, seq: list) -> None:
    if len(sp) != len(seq):
        raise LengthMismatch(f"{len(sp)} speculative tasks vs {len(seq)} sequential")
    if not sp:
        raise LengthMismatch("empty task lists")


def delta_time(sp_times: list[float], seq_times: list[float]) -> float:
    """Mean percent time saved; positive is faster than sequential."""
    _paired(sp_times, seq_times)
    return 100.0 * sum(1.0 - s / q for s, q in zip(sp_times, seq_times)) / len(sp_times)


def delta_tokens(sp: list[float], seq: list[float]) -> float:
    """Mean percent token overhead; positive is more than sequential."""
    _paired(sp, seq)
    return 100.0 * sum(s / q - 1.0 for s, q in zip(sp, seq)) / len(sp)


def delta_cost(
    sp_tasks: list[BaselineCosts], seq_tasks: list[BaselineCosts], prices: PriceTable
) -> float:
    _paired(sp_tasks, seq_tasks)
    return (
        100.0
        * sum(s.cost(prices) / q.cost(prices) - 1.0 for s, q in zip(sp_tasks, seq_tasks))
        / len(sp_tasks)
    )


def ratios(
    run_tasks: list[BaselineCosts], ref_tasks: list[BaselineCosts], prices: PriceTable
) -> tuple[float, float, float, float]:
    """(T, P, G, Cost) multipliers of aggregate totals vs the reference."""
    t = sum(x.time_ms for x in run_tasks) / sum(x.time_ms for x in ref_tasks)
    p = sum(x.prompt_total for x in run_tasks) / sum(x.prompt_total for x in ref_tasks)
    g = sum(x.gen_total for x in run_tasks) / sum(x.gen_total for x in ref_tasks)
    c = sum(x.cost(prices) for x in run_tasks) / sum(x.cost(prices) for x in ref_tasks)
    return t, p, g, c


def peak_concurrency(intervals: list[tuple[int, int]]) -> int:
    """Max overlap of half-open [start, end) intervals by sweep line."""
    events: list[tuple[int, int]] = []
    for s, e in intervals:
        if e > s:
            events.append((s, 1))
            events.append((e, -1))
    events.sort()  # ends sort before starts at equal times: -1 < 1
    peak = cur = 0
    for _, d in events:
        cur += d
        peak = max(peak, cur)
    return peak


def concurrency(
    ledger_rows_per_task: list[list[dict]], rounds_rows: list[dict]
) -> tuple[float, float]:
    """(mean per-task peak concurrent calls, mean issued k over rounds)."""
    if not ledger_rows_per_task or not rounds_rows:
        raise LengthMismatch("concurrency needs at least one task and one round")
    peaks = [
        peak_concurrency([(r["start_ms"], r["end_ms"]) for r in rows])
        for rows in ledger_rows_per_task
    ]
    mc_bar = sum(peaks) / len(peaks)
    k_bar = sum(r["k"] for r in rounds_rows) / len(rounds_rows)
    return mc_bar, k_bar


_COMPONENTS = ("approx_prompt", "approx_gen", "target_prompt", "target_gen")


def _component_sums(tasks: list[BaselineCosts]) -> dict[str, int]:
    out = {c: 0 for c in _COMPONENTS}
    for t in tasks:
        out["approx_prompt"] += t.approx_prompt
        out["approx_gen"] += t.approx_gen
        out["target_prompt"] += t.target_prompt
        out["target_gen"] += t.target_gen
    return out


def _with_totals(row: dict[str, int]) -> dict[str, int]:
    row = dict(row)
    row["total_prompt"] = row["approx_prompt"] + row["target_prompt"]
    row["total_gen"] = row["approx_gen"] + row["target_gen"]
    row["total"] = row["total_prompt"] + row["total_gen"]
    return row


def cost_breakdown(
    actual_tasks: list[BaselineCosts], normal_tasks: list[BaselineCosts]
) -> dict[str, dict[str, int]]:
    """Actual vs normal-plan token sums and their difference.

    The normal plan is both agents planning every step exactly once; the
    difference is the run's redundant spend (negative components are
    possible only when a policy skips approx calls entirely).
    """
    actual = _component_sums(actual_tasks)
    normal = _component_sums(normal_tasks)
    redundant = {c: actual[c] - normal[c] for c in _COMPONENTS}
    return {
        "actual": _with_totals(actual),
        "normal": _with_totals(normal),
        "redundant": _with_totals(redundant),
    }


def redundant_census(ledger_rows: list[dict], rounds_rows: list[dict]) -> dict[str, int]:
    """Attribute wasted tokens call by call.

    A call is waste when its round ended in a mismatch and its step lies
    beyond the committed range (start_step + matched_count): such steps are
    re-planned in a later round, so all tokens these calls consumed, partial
    or complete, bought nothing.
    """
    cutoff: dict[int, int] = {}
    for r in rounds_rows:
        if r["terminal"] == MISMATCH:
            cutoff[r["round_id"]] = r["start_step"] + r["matched_count"]
    out = {c: 0 for c in _COMPONENTS}
    for row in ledger_rows:
        cut = cutoff.get(row["round_id"])
        if cut is None or row["step"] <= cut:
            continue
        role = "approx" if row["role"] == APPROX else "target"
        out[f"{role}_prompt"] += row["prompt_tokens"]
        out[f"{role}_gen"] += row["gen_tokens"]
    return _with_totals(out)


def accuracy_windows(
    rounds_rows: list[dict], task_round_ranges: list[tuple[int, int]], window: int = 50
) -> list[dict]:
    """Exact-match rate of issued k against the realized run length, per
    window of consecutive tasks. Only mismatch rounds reveal the truth."""
    by_id = {r["round_id"]: r for r in rounds_rows}
    rows = []
    for lo in range(0, len(task_round_ranges), window):
        hi = min(lo + window, len(task_round_ranges))
        eligible = 0
        hits = 0
        for first, n in task_round_ranges[lo:hi]:
            for rid in range(first, first + n):
                r = by_id[rid]
                if r["terminal"] != MISMATCH:
                    continue
                eligible += 1
                if r["k"] == r["matched_count"] + 1:
                    hits += 1
        rows.append(
            {
                "task_lo": lo,
                "task_hi": hi,
                "eligible_rounds": eligible,
                "accuracy": (hits / eligible) if eligible else None,
            }
        )
    return rows


@dataclass
class PolicyRun:
    """Everything loaded from disk for one policy of a run directory."""

    policy: str
    tasks: list[BaselineCosts]  # actual per-task time and token sums
    ledger_rows: list[dict]
    rounds_rows: list[dict]
    task_round_ranges: list[tuple[int, int]]

    @property
    def ledger_rows_per_task(self) -> list[list[dict]]:
        owner = {}
        for i, (first, n) in enumerate(self.task_round_ranges):
            for rid in range(first, first + n):
                owner[rid] = i
        per_task: list[list[dict]] = [[] for _ in self.task_round_ranges]
        for row in self.ledger_rows:
            per_task[owner[row["round_id"]]].append(row)
        return per_task


def _run_file(run_dir: str, name: str) -> str:
    path = os.path.join(run_dir, name)
    if not os.path.exists(path):
        raise MissingRun(f"{name} not found in {run_dir}")
    return path


def load_policy_run(run_dir: str, policy: str) -> PolicyRun:
    ledger_rows = read_jsonl(_run_file(run_dir, f"ledger-{policy}.jsonl"))
    rounds_rows = read_jsonl(_run_file(run_dir, f"rounds-{policy}.jsonl"))
    results = read_jsonl(_run_file(run_dir, f"results-{policy}.jsonl"))
    ranges = [(r["first_round_id"], r["n_rounds"]) for r in results]
    sums: list[BaselineCosts] = []
    owner = {}
    for i, (first, n) in enumerate(ranges):
        for rid in range(first, first + n):
            owner[rid] = i
    per_task = [BaselineCosts(time_ms=r["total_ms"]) for r in results]
    for row in ledger_rows:
        t = per_task[owner[row["round_id"]]]
        if row["role"] == APPROX:
            t.approx_prompt += row["prompt_tokens"]
            t.approx_gen += row["gen_tokens"]
        else:
            t.target_prompt += row["prompt_tokens"]
            t.target_gen += row["gen_tokens"]
    sums = per_task
    return PolicyRun(policy, sums, ledger_rows, rounds_rows, ranges)


def load_baseline(run_dir: str) -> list[BaselineCosts]:
    rows = read_jsonl(_run_file(run_dir, "baseline.jsonl"))
    return [
        BaselineCosts(
            time_ms=r["time_ms"],
            approx_prompt=r["approx_prompt"],
            approx_gen=r["approx_gen"],
            target_prompt=r["target_prompt"],
            target_gen=r["target_gen"],
        )
        for r in rows
    ]


def policy_report_row(
    run: PolicyRun, baseline: list[BaselineCosts], ref: PolicyRun, prices: PriceTable
) -> dict:
    if len(run.tasks) != len(baseline):
        raise LengthMismatch(f"{len(run.tasks)} tasks vs {len(baseline)} baseline rows")
    d_t = delta_time([t.time_ms for t in run.tasks], [b.time_ms for b in baseline])
    d_p = delta_tokens([t.prompt_total for t in run.tasks], [b.prompt_total for b in baseline])
    d_g = delta_tokens([t.gen_total for t in run.tasks], [b.gen_total for b in baseline])
    d_c = delta_cost(run.tasks, baseline, prices)
    t_x, p_x, g_x, c_x = ratios(run.tasks, ref.tasks, prices)
    mc_bar, k_bar = concurrency(run.ledger_rows_per_task, run.rounds_rows)
    return {
        "policy": run.policy,
        "delta_t": d_t,
        "delta_p": d_p,
        "delta_g": d_g,
        "delta_cost": d_c,
        "t_ratio": t_x,
        "p_ratio": p_x,
        "g_ratio": g_x,
        "cost_ratio": c_x,
        "mc_bar": mc_bar,
        "k_bar": k_bar,
    }


REPORT_COLUMNS = (
    ("policy", "{}"),
    ("delta_t", "{:.2f}"),
    ("delta_p", "{:.2f}"),
    ("delta_g", "{:.2f}"),
    ("delta_cost", "{:.2f}"),
    ("t_ratio", "{:.3f}"),
    ("p_ratio", "{:.3f}"),
    ("g_ratio", "{:.3f}"),
    ("cost_ratio", "{:.3f}"),
    ("mc_bar", "{:.2f}"),
    ("k_bar", "{:.2f}"),
)

BREAKDOWN_COLUMNS = (
    "policy",
    "plan",
    "approx_prompt",
    "approx_gen",
    "target_prompt",
    "target_gen",
    "total_prompt",
    "total_gen",
    "total",
)


def write_report_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(name for name, _ in REPORT_COLUMNS) + "\n")
        for row in rows:
            f.write(",".join(fmt.format(row[name]) for name, fmt in REPORT_COLUMNS) + "\n")


def write_breakdown_csv(path: str, entries: list[tuple[str, dict[str, dict[str, int]]]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(BREAKDOWN_COLUMNS) + "\n")
        for policy, table in entries:
            for plan in ("actual", "normal", "redundant"):
                row = table[plan]
                cells = [policy, plan] + [str(row[c]) for c in BREAKDOWN_COLUMNS[2:]]
                f.write(",".join(cells) + "\n")


def write_scatter_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("policy,delta_t,delta_p,delta_g\n")
        for row in rows:
            f.write(
                "{},{:.2f},{:.2f},{:.2f}\n".format(
                    row["policy"], row["delta_t"], row["delta_p"], row["delta_g"]
                )
            )


def write_accuracy_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("task_lo,task_hi,eligible_rounds,accuracy\n")
        for r in rows:
            acc = "" if r["accuracy"] is None else "{:.4f}".format(r["accuracy"])
            f.write(f"{r['task_lo']},{r['task_hi']},{r['eligible_rounds']},{acc}\n")
