"""Command-line front end: ``phgrid <subcommand> ...``.

Subcommands: ``gen-scenarios``, ``ph-weights``, ``train``, ``eval``, ``compare``.
Data and summaries go to stdout, diagnostics to stderr.  With a fixed seed and
``--workers 1`` every output file is byte-identical across runs.

Exit codes::

    0   success
    1   bad input (unreadable or malformed files, invalid config)
    2   scenario validation exhausted its draw budget
    3   non-finite loss or activations during training
    4   checkpoint does not match the run (network, variant, environment)
    5   scenario or weight-cache file belongs to a different network
    64  command-line usage error
"""
from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import evaluate as ev
from .env import EnvConfig, GridEnv
from .grid import (NetworkFormatError, effective_adjacency, load_network, network_hash,
                   read_network, serialize_network)
from .policy import CheckpointError, GcapcnConfig, GcapcnPolicy, load_policy
from .ppo import NonFiniteLossError, PPOTrainer, TrainConfig
from .scenarios import (NetworkMismatchError, ScenarioError, generate, read_scenarios,
                        select_centers, split_disjoint, validate, write_scenarios)
from .seeding import stream
from .tda import DiagramCache, load_weight_cache, ph_weights_from_adjacency, save_weight_cache

log = logging.getLogger("phgrid")

EXIT_OK, EXIT_INPUT, EXIT_EXHAUSTED, EXIT_NONFINITE, EXIT_CHECKPOINT, EXIT_HASH = 0, 1, 2, 3, 4, 5
EXIT_USAGE = 64

OUT_ENV = "GRID_RL_OUT"
CHECKPOINT_NAME = "checkpoint.ckpt"
CURVE_NAME = "curve.csv"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- networks


def bundled_networks() -> list[str]:
    data = resources.files("phgrid") / "data"
    return sorted(p.name[:-4] for p in data.iterdir() if p.name.endswith(".net"))


def resolve_network(name: str, base: Path | None = None) -> Path:
    """A path (relative to ``base`` if given) or the name of a bundled network."""
    p = Path(name)
    if base is not None and not p.is_absolute():
        p = base / p
    if p.is_file():
        return p
    bundled = resources.files("phgrid") / "data" / f"{name}.net"
    if bundled.is_file():
        return Path(str(bundled))
    raise CliError(f"network {name!r} not found (bundled: {', '.join(bundled_networks())})")


def open_network(name: str, base: Path | None = None):
    path = resolve_network(name, base)
    try:
        return read_network(path)
    except NetworkFormatError as exc:
        raise CliError(f"{path}: {exc}") from None


# ---------------------------------------------------------------- config


def _coerce(kind, text: str):
    if kind is bool:
        return text.strip().lower() in ("1", "yes", "true", "on")
    if kind is tuple:
        return tuple(int(x) for x in text.replace(" ", "").split(",") if x)
    return kind(text)


def _section(parser: configparser.ConfigParser, name: str, cls, overrides: dict | None = None):
    """Build dataclass ``cls`` from a config section; unknown keys are errors."""
    kinds = {f.name: type(f.default) for f in fields(cls)}
    values = {}
    if parser.has_section(name):
        for key, text in parser.items(name):
            if key not in kinds:
                raise CliError(f"[{name}] unknown key {key!r}; expected one of {sorted(kinds)}")
            try:
                values[key] = _coerce(kinds[key], text)
            except ValueError as exc:
                raise CliError(f"[{name}] {key}: {exc}") from None
    values.update(overrides or {})
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise CliError(f"[{name}] {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    network: Path
    train_scenarios: tuple
    test_scenarios: tuple
    env: EnvConfig
    policy: GcapcnConfig
    train: TrainConfig
    out: Path | None
    seed: int
    source: Path | None = field(default=None, compare=False)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        """Parse an INI-style run file.

        Sections: ``[run]`` (network, train_scenarios, test_scenarios, out,
        seed), ``[env]`` (horizon, v_min, v_max), ``[ph]`` (k, refresh),
        ``[policy]`` and ``[train]`` with the fields of the matching config
        classes.  Relative paths are taken from the config file's directory.
        The run seed overrides any ``[train] seed``.
        """
        path = Path(path)
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise CliError(f"cannot read config {path}: {exc}") from None
        base = path.parent
        run = dict(parser.items("run")) if parser.has_section("run") else {}
        if "network" not in run:
            raise CliError(f"{path}: [run] network is required")
        seed = int(run.get("seed", 0))

        def paths(key):
            out = []
            for item in run.get(key, "").split(","):
                if item.strip():
                    p = base / item.strip()
                    if not p.is_file():
                        raise CliError(f"{path}: {key} file {p} does not exist")
                    out.append(p)
            return tuple(out)

        ph = dict(parser.items("ph")) if parser.has_section("ph") else {}
        env_extra = {}
        if "k" in ph:
            env_extra["k"] = int(ph.pop("k"))
        if "refresh" in ph:
            env_extra["ph_refresh"] = ph.pop("refresh")
        if ph:
            raise CliError(f"[ph] unknown keys {sorted(ph)}; expected k, refresh")
        return cls(
            network=resolve_network(run["network"], base),
            train_scenarios=paths("train_scenarios"),
            test_scenarios=paths("test_scenarios"),
            env=_section(parser, "env", EnvConfig, env_extra),
            policy=_section(parser, "policy", GcapcnConfig),
            train=_section(parser, "train", TrainConfig, {"seed": seed}),
            out=(base / run["out"]) if run.get("out") else None,
            seed=seed,
            source=path,
        )


def output_dir(flag: str | None, config_out: Path | None = None) -> Path:
    """``--out`` flag, then the config's out, then ``$GRID_RL_OUT``, then cwd."""
    if flag:
        out = Path(flag)
    elif config_out is not None:
        out = config_out
    else:
        out = Path(os.environ.get(OUT_ENV, "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_scenarios_for(path, g):
    try:
        return read_scenarios(path, network_hash(g))[1]
    except NetworkMismatchError as exc:
        raise CliError(str(exc), EXIT_HASH) from None
    except (OSError, ValueError) as exc:
        raise CliError(str(exc)) from None


def load_ph_cache(path, g, env_cfg: EnvConfig) -> dict:
    try:
        net, cache = load_weight_cache(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot read weight cache {path}: {exc}") from None
    if net != network_hash(g):
        raise CliError(f"weight cache {path} was computed for a different network", EXIT_HASH)
    return {sig: w for sig, w in cache.items() if w.k == env_cfg.k}


# ---------------------------------------------------------------- commands


def cmd_gen_scenarios(args) -> int:
    g = open_network(args.network)
    tests = args.test_count or []
    needed = args.count + sum(tests)
    budget = args.max_draws if args.max_draws is not None else 20 * needed + 100
    centers = select_centers(g, min(args.centers, g.n_nodes))
    env = GridEnv(g, EnvConfig(variant="plain"))
    rng = stream(args.seed, "scenarios")
    pool, seen, invalid = [], set(), set()
    drawn = rejected = duplicates = 0
    try:
        while len(pool) < needed:
            if drawn >= budget:
                raise CliError(f"only {len(pool)} of {needed} valid distinct scenarios after "
                               f"{drawn} draws ({rejected} failed validation)", EXIT_EXHAUSTED)
            sc = generate(g, centers, 1, rng)[0]
            drawn += 1
            if sc.key in seen:
                duplicates += 1
                continue
            if sc.key in invalid or not validate(sc, env):
                invalid.add(sc.key)
                rejected += 1
                continue
            seen.add(sc.key)
            pool.append(sc)
    except ScenarioError as exc:
        raise CliError(str(exc), EXIT_EXHAUSTED) from None
    split_rng = stream(args.seed, "split")
    rest, test_sets = pool, []
    for m in tests:
        rest, test = split_disjoint(rest, m, split_rng)
        test_sets.append(test)
    out = output_dir(args.out)
    h = network_hash(g)
    write_scenarios(out / "train.csv", rest, h)
    for i, test in enumerate(test_sets, start=1):
        write_scenarios(out / f"test_{i}.csv", test, h)
    sev = np.array([sc.severity for sc in pool]) if pool else np.zeros(1)
    print(f"network {h}")
    print(f"train {len(rest)}")
    for i, test in enumerate(test_sets, start=1):
        print(f"test_{i} {len(test)}")
    print(f"drawn {drawn}")
    print(f"rejected {rejected}")
    print(f"duplicates {duplicates}")
    print(f"rejection_rate {rejected / max(drawn, 1):.6f}")
    print(f"mean_severity {float(sev.mean()):.6f}")
    return EXIT_OK


def cmd_ph_weights(args) -> int:
    g = open_network(args.network)
    adjs = [effective_adjacency(g)]
    for path in args.scenarios or []:
        for sc in load_scenarios_for(path, g):
            adjs.append(effective_adjacency(g, None, sc.failed_lines))
    cache, weights = DiagramCache(), {}
    for A in adjs:
        w = ph_weights_from_adjacency(A, args.k, cache)
        weights.setdefault(w.topology_signature, w)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weight_cache(out, [weights[s] for s in sorted(weights)], network_hash(g))
    print(f"topologies {len(weights)}")
    print(f"node_diagrams {len(cache)}")
    print(f"k {args.k}")
    return EXIT_OK


def _run_meta(g, variant: str) -> dict:
    return {"network_hash": network_hash(g), "variant": variant,
            "network_text": serialize_network(g)}


def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config)
    g = open_network(str(cfg.network))
    variant = args.variant or cfg.env.variant
    env_cfg = EnvConfig(**{**cfg.env.__dict__, "variant": variant})
    train_cfg = cfg.train
    if args.total_steps is not None:
        train_cfg = TrainConfig(**{**train_cfg.__dict__, "total_steps": args.total_steps})
    if not cfg.train_scenarios:
        raise CliError(f"{args.config}: [run] train_scenarios is required for training")
    scenarios = [sc for p in cfg.train_scenarios for sc in load_scenarios_for(p, g)]
    weight_cache = load_ph_cache(args.ph_cache, g, env_cfg) if args.ph_cache else None
    env = GridEnv(g, env_cfg, weight_cache=weight_cache)
    if args.workers != 1:
        log.warning("training rollouts run in a single process; --workers %d applies to eval only",
                    args.workers)
    out = output_dir(args.out, cfg.out)
    meta = _run_meta(g, variant)
    if args.resume:
        try:
            trainer = PPOTrainer.resume(args.resume, env, train_cfg, scenarios, meta)
        except CheckpointError as exc:
            raise CliError(f"cannot resume from {args.resume}: {exc}", EXIT_CHECKPOINT) from None
        except (OSError, KeyError, ValueError) as exc:
            raise CliError(f"cannot resume from {args.resume}: {exc}", EXIT_CHECKPOINT) from None
        if trainer.policy.cfg != cfg.policy:
            raise CliError("checkpoint policy architecture differs from the config", EXIT_CHECKPOINT)
        log.info("resumed at step %d", trainer.steps)
    else:
        policy = GcapcnPolicy(cfg.policy, g.n_nodes, g.n_lines, env.n_actions,
                              stream(cfg.seed, "init"))
        trainer = PPOTrainer(env, policy, train_cfg, scenarios, meta)
    try:
        trainer.train(out / CHECKPOINT_NAME, out / CURVE_NAME)
    except (NonFiniteLossError, FloatingPointError) as exc:
        raise CliError(str(exc), EXIT_NONFINITE) from None
    recent = [r for _, r in trainer.episodes[-train_cfg.moving_avg_window:]]
    print(f"variant {variant}")
    print(f"steps {trainer.steps}")
    print(f"updates {trainer.updates}")
    print(f"episodes {len(trainer.episodes)}")
    if recent:
        print(f"recent_mean_return {float(np.mean(recent))!r}")
    print(f"checkpoint {out / CHECKPOINT_NAME}")
    print(f"curve {out / CURVE_NAME}")
    return EXIT_OK


def _load_model(path, g_override=None):
    """Checkpoint -> (policy, network graph, env config)."""
    try:
        policy, state, _ = load_policy(path)
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}", EXIT_CHECKPOINT) from None
    meta = state.get("meta", {})
    if "network_text" not in meta:
        raise CliError(f"{path}: checkpoint carries no network", EXIT_CHECKPOINT)
    g = load_network(meta["network_text"])
    if g_override is not None:
        if network_hash(g_override) != network_hash(g):
            raise CliError(f"{path} was trained on a different network", EXIT_HASH)
        g = g_override
    env_cfg = EnvConfig(**state["env_config"])
    return policy, g, env_cfg


def _evaluate_checkpoint(path, scenario_path, workers, g_override=None):
    policy, g, env_cfg = _load_model(path, g_override)
    scenarios = load_scenarios_for(scenario_path, g)
    records, summary = ev.evaluate(policy, scenarios, GridEnv(g, env_cfg), workers=workers)
    return records, summary, g


def cmd_eval(args) -> int:
    g = open_network(args.network) if args.network else None
    records, summary, _ = _evaluate_checkpoint(args.checkpoint, args.scenarios, args.workers, g)
    out = output_dir(args.out)
    per, summ = ev.export(records, out, args.prefix)
    print(f"scenarios {len(records)}")
    for metric, (m, s) in summary.items():
        print(f"{metric} {m!r} {s!r}")
    print(f"per_scenario {per}")
    print(f"summary {summ}")
    return EXIT_OK


def cmd_compare(args) -> int:
    if len(args.checkpoint) != 2:
        raise CliError("compare needs exactly two --checkpoint flags", EXIT_USAGE)
    names = args.names.split(",") if args.names else ["A", "B"]
    if len(names) != 2:
        raise CliError("--names takes two comma-separated labels", EXIT_USAGE)
    g = open_network(args.network) if args.network else None
    ra, _, ga = _evaluate_checkpoint(args.checkpoint[0], args.scenarios, args.workers, g)
    rb, _, gb = _evaluate_checkpoint(args.checkpoint[1], args.scenarios, args.workers, ga)
    out = output_dir(args.out)
    ev.export(ra, out, f"{args.prefix}_{names[0]}")
    ev.export(rb, out, f"{args.prefix}_{names[1]}")
    _, report = ev.compare(ra, rb, names[0], names[1])
    with open(out / f"{args.prefix}_report.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report)
    sys.stdout.write(report)
    return EXIT_OK


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="phgrid", description="Topology-aware RL for outage management.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-scenarios", help="generate validated train/test outage scenarios")
    s.add_argument("--network", required=True, help="network file or bundled name")
    s.add_argument("--count", type=int, required=True, help="training pool size")
    s.add_argument("--test-count", type=int, action="append",
                   help="size of one disjoint test set; repeat for several sets")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
    s.add_argument("--centers", type=int, default=25, help="number of outage centers")
    s.add_argument("--max-draws", type=int, help="draw budget before giving up (exit 2)")
    s.set_defaults(func=cmd_gen_scenarios)

    s = sub.add_parser("ph-weights", help="precompute topological edge weights")
    s.add_argument("--network", required=True)
    s.add_argument("--scenarios", action="append", help="also cover these post-outage topologies")
    s.add_argument("--k", type=int, default=2, help="hop radius of node neighbourhoods")
    s.add_argument("--out", required=True, help="weight-cache file to write")
    s.set_defaults(func=cmd_ph_weights)

    s = sub.add_parser("train", help="train a policy with PPO")
    s.add_argument("--config", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--variant", choices=("ph", "plain"))
    s.add_argument("--out")
    s.add_argument("--total-steps", type=int, help="override [train] total_steps")
    s.add_argument("--ph-cache", help="weight cache written by ph-weights")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="greedy evaluation of one checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scenarios", required=True)
    s.add_argument("--network", help="check the checkpoint against this network")
    s.add_argument("--out")
    s.add_argument("--prefix", default="eval")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", help="evaluate two checkpoints and test the difference")
    s.add_argument("--checkpoint", action="append", required=True)
    s.add_argument("--scenarios", required=True)
    s.add_argument("--names", help="labels for the two models, e.g. ph,plain")
    s.add_argument("--network")
    s.add_argument("--out")
    s.add_argument("--prefix", default="compare")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "workers", 1) < 1:
        print("phgrid: error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        print(f"phgrid: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
