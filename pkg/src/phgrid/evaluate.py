"""Out-of-sample evaluation, win counting and paired t-tests."""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

from .env import GridEnv, reward_from
from .policy import GcapcnPolicy, greedy_action

METRIC_COLUMNS = ("scenario", "reward", "e_supp", "v_viol")
AUX_COLUMNS = ("cumulative_reward",)


@dataclass
class ScenarioMetrics:
    scenario: int
    reward: float
    e_supp: float
    v_viol: float
    cumulative_reward: float = float("nan")


@dataclass
class TTestResult:
    t: float
    df: int
    p: float
    zero_variance: bool = False


def run_greedy_episode(policy: GcapcnPolicy, env: GridEnv, scenario, sid: int) -> ScenarioMetrics:
    obs = env.reset(scenario)
    total, done = 0.0, False
    info = env.last_info
    reward = 0.0
    while not done:
        out = policy.act(obs, obs.L)
        obs, reward, done, info = env.step(greedy_action(out.probs))
        total += reward
    return ScenarioMetrics(sid, reward, info["e_supp"], info["v_viol"], total)


def _evaluate_serial(policy, items, env: GridEnv):
    records = []
    for sid, sc in items:
        try:
            records.append(run_greedy_episode(policy, env, sc, sid))
        except Exception:  # noqa: BLE001 - scored as a convergence failure
            records.append(ScenarioMetrics(sid, reward_from(0.0, 0.0, 1), 0.0, 0.0,
                                           -float(env.cfg.horizon)))
    return records


def _evaluate_chunk(policy, items, g, cfg, solver):
    return _evaluate_serial(policy, items, GridEnv(g, cfg, solver))


def evaluate(policy: GcapcnPolicy, scenarios, env: GridEnv, ids=None, workers: int = 1):
    """Greedy rollouts; returns ``(records, summary)``.

    ``summary`` maps metric -> (mean, sample std); std is 0 for a single record.
    A scenario on which the environment raises is recorded with reward -1.
    With ``workers > 1`` scenarios are split over processes, each with its own
    environment; greedy episodes are deterministic, so the records match the
    serial result.
    """
    ids = range(len(scenarios)) if ids is None else ids
    items = list(zip(ids, scenarios))
    if workers > 1 and len(items) > 1:
        chunks = [items[w::workers] for w in range(workers) if items[w::workers]]
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            futures = [pool.submit(_evaluate_chunk, policy, c, env.g, env.cfg, env.solver)
                       for c in chunks]
            records = [r for f in futures for r in f.result()]
    else:
        records = _evaluate_serial(policy, items, env)
    records.sort(key=lambda r: r.scenario)
    return records, summarize(records)


def summarize(records) -> dict[str, tuple[float, float]]:
    out = {}
    for col in ("reward", "e_supp", "v_viol", "cumulative_reward"):
        x = np.array([getattr(r, col) for r in records], dtype=float)
        if len(x) == 0:
            out[col] = (float("nan"), float("nan"))
        else:
            out[col] = (float(x.mean()), float(x.std(ddof=1)) if len(x) > 1 else 0.0)
    return out


def win_rate(a, b) -> tuple[int, int, int]:
    """(wins of a, wins of b, ties) under strict per-scenario comparison."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError("reward vectors must be aligned")
    return int((a > b).sum()), int((b > a).sum()), int((a == b).sum())


def student_t_sf_two_sided(t: float, df: int) -> float:
    """Two-sided tail probability P(|T| >= |t|) = I_{df/(df+t^2)}(df/2, 1/2)."""
    x = df / (df + t * t)
    return float(betainc(df / 2.0, 0.5, x))


def paired_t_test(a, b) -> TTestResult:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError("samples must be aligned")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return TTestResult(0.0, n - 1, 1.0, True)
        return TTestResult(math.copysign(math.inf, mean), n - 1, 0.0, True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(float(t), n - 1, student_t_sf_two_sided(t, n - 1))


# ---------------------------------------------------------------- export


def write_metrics(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS + AUX_COLUMNS)
        for r in records:
            w.writerow([r.scenario, repr(float(r.reward)), repr(float(r.e_supp)),
                        repr(float(r.v_viol)), repr(float(r.cumulative_reward))])


def read_metrics(path) -> list[ScenarioMetrics]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [ScenarioMetrics(int(r["scenario"]), float(r["reward"]), float(r["e_supp"]),
                            float(r["v_viol"]), float(r.get("cumulative_reward", "nan")))
            for r in rows]


def write_summary(path, summary) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("metric", "mean", "std"))
        for k, (m, s) in summary.items():
            w.writerow([k, repr(m), repr(s)])


def export(records, directory, prefix: str = "eval") -> tuple[str, str]:
    per = os.path.join(directory, f"{prefix}_scenarios.csv")
    summ = os.path.join(directory, f"{prefix}_summary.csv")
    write_metrics(per, records)
    write_summary(summ, summarize(records))
    return per, summ


def compare(records_a, records_b, name_a: str = "A", name_b: str = "B") -> tuple[dict, str]:
    """Match records by scenario id and build a text report."""
    by_b = {r.scenario: r for r in records_b}
    common = [r for r in records_a if r.scenario in by_b]
    if len(common) != len(records_a) or len(common) != len(records_b):
        raise ValueError("the two evaluations cover different scenario ids")
    pairs = [(r, by_b[r.scenario]) for r in common]
    result = {"wins": win_rate([x.reward for x, _ in pairs], [y.reward for _, y in pairs]),
              "tests": {}}
    sa, sb = summarize([x for x, _ in pairs]), summarize([y for _, y in pairs])
    lines = [f"{'metric':<10} {name_a:>24} {name_b:>24}"]
    for col in ("reward", "e_supp", "v_viol"):
        ma, da = sa[col]
        mb, db = sb[col]
        lines.append(f"{col:<10} {f'{ma:.4f}+-{da:.4f}':>24} {f'{mb:.4f}+-{db:.4f}':>24}")
    lines.append("")
    lines.append("paired t-test (two-sided)")
    for col in ("reward", "e_supp", "v_viol"):
        if len(pairs) >= 2:
            res = paired_t_test([getattr(x, col) for x, _ in pairs],
                                [getattr(y, col) for _, y in pairs])
            result["tests"][col] = res
            flag = "  (zero variance)" if res.zero_variance else ""
            lines.append(f"{col:<10} t={res.t:.6g} df={res.df} p={res.p:.6g}{flag}")
    wa, wb, ties = result["wins"]
    lines.append("")
    lines.append(f"wins {name_a}={wa} {name_b}={wb} ties={ties} of {len(pairs)}")
    return result, "\n".join(lines) + "\n"
