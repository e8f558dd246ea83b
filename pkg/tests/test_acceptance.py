"""Acceptance suite: one test per criterion, summarised at the end of the run."""
import itertools
import math
import time
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import make_net, policy_gradient_errors
from test_tda import brute_w2, random_diagram
from test_powerflow import nodal_residual
from phgrid import cli
from phgrid.env import EnvConfig, GridEnv, compute_v_viol, reward_from
from phgrid.evaluate import evaluate, paired_t_test, win_rate
from phgrid.grid import hop_distances, islands
from phgrid.policy import GcapcnConfig, GcapcnPolicy, greedy_action, sample_action
from phgrid.powerflow import solve
from phgrid.ppo import PPOTrainer, TrainConfig
from phgrid.scenarios import (dedupe, failure_count, generate, select_centers, split_disjoint,
                              subgraph_lines, validate)
from phgrid.seeding import stream
from phgrid.tda import boundary_reduction, h0_union_find, vietoris_rips_persistence, wasserstein2


def all_graphs(n):
    pairs = list(itertools.combinations(range(n), 2))
    for mask in range(1 << len(pairs)):
        A = np.zeros((n, n), np.int8)
        for k, (a, b) in enumerate(pairs):
            if mask >> k & 1:
                A[a, b] = A[b, a] = 1
        yield A


def test_criterion_01_ph_oracle_equivalence(criterion):
    with criterion(1, "PH: union-find PD0 == reduction PD0 on all connected graphs <= 6 nodes") as note:
        start = time.perf_counter()
        graphs = trees = 0
        for n in range(1, 7):
            for A in all_graphs(n):
                if len(islands(A)) != 1:
                    continue
                D = hop_distances(A)
                cap = max(float(D.max()), 1.0)
                red0, red1 = boundary_reduction(D, cap)
                assert h0_union_find(D, cap) == red0, A
                if A.sum() // 2 == n - 1:
                    trees += 1
                    assert len(red1) == 0, A
                graphs += 1
        cyc = np.array([[0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0]])
        pd1 = vietoris_rips_persistence(hop_distances(cyc), 2)[1]
        assert pd1.points.tolist() == [[1.0, 2.0]]
        elapsed = time.perf_counter() - start
        note(f"{graphs} connected graphs, {trees} trees, {elapsed:.1f}s")
        assert graphs == 27476  # connected labelled graphs on 1..6 vertices
        assert elapsed < 300


def test_criterion_02_wasserstein(criterion):
    with criterion(2, "W2: assignment == brute force (1e-9); metric axioms") as note:
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(200):
            a, b = random_diagram(rng, 4), random_diagram(rng, 4)
            worst = max(worst, abs(wasserstein2(a, b) - brute_w2(a, b)))
        assert worst <= 1e-9
        slack = 0.0
        for _ in range(200):
            a, b, c = (random_diagram(rng, 5) for _ in range(3))
            assert wasserstein2(a, b) == wasserstein2(b, a)
            assert wasserstein2(a, a) == 0.0
            assert wasserstein2(a, b) >= 0.0
            slack = max(slack, wasserstein2(a, c) - wasserstein2(a, b) - wasserstein2(b, c))
        assert slack <= 1e-9
        note(f"max |assign - brute| {worst:.1e}, max triangle excess {max(slack, 0):.1e}")


def test_criterion_03_gradients(criterion):
    with criterion(3, "gradient check, 6 nodes, L_e=2 p=2 K=2, rel err < 1e-4") as note:
        start = time.perf_counter()
        errors = policy_gradient_errors(seed=0, n_nodes=6, step=1e-5)
        elapsed = time.perf_counter() - start
        name, worst = max(errors.items(), key=lambda kv: kv[1])
        note(f"{len(errors)} tensors, worst {name} {worst:.1e}, {elapsed:.1f}s")
        assert worst < 1e-4
        assert elapsed < 120


def test_criterion_04_equations(criterion, toy):
    with criterion(4, "reward and voltage-violation examples to 1e-12; C_viol => -1") as note:
        V = np.array([[1.10, 1.0, 1.0], [1.0, 0.99, 1.01]])
        assert abs(compute_v_viol(V, np.ones((2, 3), bool)) - 0.05 / 6) <= 1e-12
        assert compute_v_viol(np.zeros((2, 3)), np.zeros((2, 3), bool)) == 0.0
        assert abs(reward_from(0.8, 0.1, 0) - 0.7) <= 1e-12
        assert reward_from(0.8, 0.1, 1) == -1.0
        env = GridEnv(toy, EnvConfig(variant="plain"))
        rng = np.random.default_rng(4)
        ids = [ln.id for ln in toy.lines]
        flagged = 0
        for _ in range(300):
            env.reset(SimpleNamespace(failed_lines=tuple(rng.choice(ids, 2, replace=False))))
            _, r, _, info = env.step(rng.integers(0, 2, env.n_actions))
            if info["c_viol"]:
                flagged += 1
                assert r == -1.0
            else:
                assert r == info["e_supp"] - info["v_viol"]
        note(f"{flagged}/300 random steps with C_viol=1, all scored -1")
        assert flagged > 0


def test_criterion_05_power_flow_conservation(criterion, ieee123):
    with criterion(5, "power flow: balance < 1e-9 on 100 random states; dead islands unserved") as note:
        g = ieee123
        rng = np.random.default_rng(55)
        ids = [ln.id for ln in g.lines]
        worst, overloads = 0.0, 0
        for _ in range(100):
            states = rng.random(len(g.switches)) < rng.random()
            outage = rng.choice(ids, size=int(rng.integers(0, 12)), replace=False)
            loads = rng.random(len(g.loads)) < rng.uniform(0.5, 1.0)
            res = solve(g, states, outage, loads)
            worst = max(worst, nodal_residual(g, res))
            over = any(r.overloaded for r in res.island_report)
            overloads += over
            if over:
                assert not res.converged
            else:
                assert res.converged
            for r in res.island_report:
                if not r.energized:
                    members = set(r.nodes)
                    for k, ld in enumerate(g.loads):
                        if g.node(ld.bus_id) in members:
                            assert not res.served[k]
                    assert (res.voltages[r.nodes] == 0).all()
        # hand-built overload: 300 kW behind one 250 kW forming DER
        small = make_net(3, [(1, 2)], substation=3, loads=[(2, 300)],
                         ders=[(1, 250, "grid_forming")])
        assert not solve(small).converged
        note(f"max residual {worst:.1e} pu, {overloads} overloaded states")
        assert worst < 1e-9


def test_criterion_06_scenario_statistics(criterion, ieee123):
    with criterion(6, "10,000 scenarios: k formula exact, mean(s) in [0.13,0.17], disjoint tests") as note:
        g = ieee123
        centers = select_centers(g, 25)
        scs = generate(g, centers, 10_000, stream(6, "scenarios"))
        sub_sizes = {}
        for s in scs:
            key = (s.center, s.radius)
            if key not in sub_sizes:
                sub_sizes[key] = set(subgraph_lines(g, s.center, s.radius))
            sub = sub_sizes[key]
            assert s.k == failure_count(s.severity, len(sub))
            assert set(s.failed_lines) <= sub
        mean_s = float(np.mean([s.severity for s in scs]))
        assert 0.13 <= mean_s <= 0.17
        env = GridEnv(g, EnvConfig(variant="plain"))
        pool = [s for s in dedupe(scs) if validate(s, env)]
        rng = stream(6, "split")
        rest, tests = pool, []
        for _ in range(3):
            rest, t = split_disjoint(rest, 100, rng)
            tests.append(t)
        train_keys = {s.key for s in rest}
        for i, t in enumerate(tests):
            assert len(t) == 100
            keys = {s.key for s in t}
            assert not keys & train_keys
            for other in tests[i + 1:]:
                assert not keys & {s.key for s in other}
        note(f"mean s {mean_s:.4f}; {len(dedupe(scs))} distinct, {len(pool)} valid; "
             f"train {len(rest)} + 3 x 100 test")


def test_criterion_07_masking(criterion, ieee123):
    with criterion(7, "masking: no masked switch closed in 1000 sampled + 1000 greedy actions") as note:
        g = ieee123
        env = GridEnv(g, EnvConfig(variant="plain"))
        switched = {s.line_id for s in g.switches}
        scs = [s for s in generate(g, select_centers(g, 25), 3000, stream(7, "scenarios"))
               if switched & set(s.failed_lines)]
        pol = GcapcnPolicy(GcapcnConfig(hidden=(8, 8), embed_dim=8), g.n_nodes, g.n_lines,
                           env.n_actions, stream(7, "init"))
        # push every slot towards ON so an unmasked implementation would close masked switches
        pol.params["decoder.out.b"].data[:] = 5.0
        rng = stream(7, "actions")
        counts = {"sampled": 0, "greedy": 0}
        masked_seen = 0
        i = 0
        while min(counts.values()) < 1000:
            obs = env.reset(scs[i % len(scs)])
            i += 1
            mask = obs.action_mask
            masked_seen += int(mask.sum())
            probs = pol.act(obs, obs.L).probs
            assert (probs[mask] == 0.0).all()
            for kind in ("sampled", "greedy"):
                if counts[kind] >= 1000:
                    continue
                a = sample_action(probs, rng, mask)[0] if kind == "sampled" else greedy_action(probs)
                assert not (a & mask).any()
                nxt, *_ = env.step(a)
                assert not nxt.config[:len(g.switches)][obs.outage_mask].any()
                counts[kind] += 1
        note(f"{counts['sampled']} sampled + {counts['greedy']} greedy, "
             f"{masked_seen} masked slots encountered")


def _random_policy_reward(env, scenarios, rng):
    rewards = []
    for s in scenarios:
        env.reset(s)
        done = False
        while not done:
            _, r, done, _ = env.step(rng.integers(0, 2, env.n_actions).astype(bool))
        rewards.append(r)
    return float(np.mean(rewards))


DESK_STEPS = 60_000


def test_criterion_08_desk_training(criterion, toy):
    with criterion(8, "toy training beats uniform random by >= 20% over 50 held-out scenarios") as note:
        start = time.perf_counter()
        g = toy
        probe = GridEnv(g, EnvConfig(variant="plain"))
        pool = [s for s in dedupe(generate(g, select_centers(g, 15), 20_000, stream(8, "scenarios")))
                if validate(s, probe)]
        train, held_out = split_disjoint(pool, 50, stream(8, "split"))
        assert len(held_out) == 50 and not {s.key for s in train} & {s.key for s in held_out}
        cfg = TrainConfig(total_steps=DESK_STEPS, rollout_length=1024, minibatch_size=128, epochs=4,
                          lr=1e-3, seed=8)
        results = {}
        for variant in ("ph", "plain"):
            env = GridEnv(g, EnvConfig(variant=variant))
            pol = GcapcnPolicy(GcapcnConfig(embed_dim=16, hidden=(16, 16)), g.n_nodes, g.n_lines,
                               env.n_actions, stream(cfg.seed, "init"))
            PPOTrainer(env, pol, cfg, train, {"variant": variant}).train()
            records, summary = evaluate(pol, held_out, env)
            results[variant] = (summary["reward"][0], [r.reward for r in records])
        random_mean = _random_policy_reward(GridEnv(g, EnvConfig(variant="plain")), held_out,
                                            stream(8, "random-policy"))
        trained = results["ph"][0]
        gain = (trained - random_mean) / abs(random_mean)
        ph_vs_plain = paired_t_test(results["ph"][1], results["plain"][1])
        wins = win_rate(results["ph"][1], results["plain"][1])
        elapsed = time.perf_counter() - start
        note(f"{len(train)} train / 50 held-out, {DESK_STEPS} steps, {elapsed / 60:.1f} min; "
             f"greedy PH {trained:.4f} vs random {random_mean:.4f} ({gain:+.0%}); "
             f"informational PH vs plain: {trained:.4f} vs {results['plain'][0]:.4f}, "
             f"wins {wins[0]}/{wins[1]}/{wins[2]}, p={ph_vs_plain.p:.3g}")
        assert DESK_STEPS <= 200_000 and elapsed < 3600
        assert trained - random_mean >= 0.2 * abs(random_mean)


def test_criterion_09_statistics(criterion):
    with criterion(9, "paired t-test oracle d=[1,2,3]; 83/100 win counting") as note:
        res = paired_t_test([1, 2, 3], [0, 0, 0])
        assert abs(res.t - 2 * math.sqrt(3)) < 1e-12 and res.df == 2
        assert abs(res.p - 0.0742) < 1e-3
        a = np.r_[np.full(83, 0.9), np.full(15, 0.4), np.full(2, 0.6)]
        b = np.r_[np.full(83, 0.5), np.full(15, 0.7), np.full(2, 0.6)]
        perm = np.random.default_rng(9).permutation(100)
        assert win_rate(a[perm], b[perm]) == (83, 15, 2)
        note(f"t={res.t:.6f} p={res.p:.6f}; wins 83/15/2")


def test_criterion_10_determinism(criterion, toy, tmp_path, capsys):
    with criterion(10, "split-run curve bit-identical; CLI outputs byte-stable") as note:
        # library level: interrupted mid-episode then resumed
        cfg = TrainConfig(total_steps=300, rollout_length=50, minibatch_size=25, epochs=2,
                          lr=1e-3, seed=10)
        scs = generate(toy, select_centers(toy, 8), 40, stream(10, "scenarios"))

        def trainer():
            env = GridEnv(toy, EnvConfig(horizon=7))
            pol = GcapcnPolicy(GcapcnConfig(embed_dim=6, hidden=(6, 6)), toy.n_nodes, toy.n_lines,
                               env.n_actions, stream(cfg.seed, "init"))
            return PPOTrainer(env, pol, cfg, scs, {"variant": "ph"})

        trainer().train(tmp_path / "full.ckpt", tmp_path / "full.csv")
        first = trainer()
        first.train_until(150, tmp_path / "half.ckpt")
        resumed = PPOTrainer.resume(tmp_path / "half.ckpt", GridEnv(toy, EnvConfig(horizon=7)),
                                    cfg, scs, {"variant": "ph"})
        resumed.train(tmp_path / "split.ckpt", tmp_path / "split.csv")
        assert (tmp_path / "full.csv").read_bytes() == (tmp_path / "split.csv").read_bytes()
        assert (tmp_path / "full.ckpt").read_bytes() == (tmp_path / "split.ckpt").read_bytes()

        # CLI level: every command twice into separate directories
        config = ("[run]\nnetwork = toy15\ntrain_scenarios = sc/train.csv\nseed = 3\n"
                  "[env]\nhorizon = 4\n[policy]\nembed_dim = 6\nhidden = 6, 6\n"
                  "[train]\ntotal_steps = 64\nrollout_length = 32\nminibatch_size = 16\nepochs = 2\n")
        stdout = {}
        for rep in ("a", "b"):
            root = tmp_path / rep
            root.mkdir()
            (root / "run.ini").write_text(config)
            outs = []
            for argv in (
                ["gen-scenarios", "--network", "toy15", "--count", "20", "--test-count", "5",
                 "--test-count", "5", "--test-count", "5", "--seed", "3", "--out", root / "sc"],
                ["ph-weights", "--network", "toy15", "--scenarios", root / "sc" / "train.csv",
                 "--out", root / "w.json"],
                ["train", "--config", root / "run.ini", "--out", root / "ph"],
                ["train", "--config", root / "run.ini", "--variant", "plain", "--out", root / "plain"],
                ["eval", "--checkpoint", root / "ph" / cli.CHECKPOINT_NAME,
                 "--scenarios", root / "sc" / "test_1.csv", "--out", root / "ev"],
                ["compare", "--checkpoint", root / "ph" / cli.CHECKPOINT_NAME,
                 "--checkpoint", root / "plain" / cli.CHECKPOINT_NAME,
                 "--scenarios", root / "sc" / "test_2.csv", "--out", root / "cmp"],
            ):
                assert cli.main([str(x) for x in argv]) == 0
                outs.append(capsys.readouterr().out.replace(str(root), "<root>"))
            stdout[rep] = outs
        assert stdout["a"] == stdout["b"]
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                       if p.is_file())
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
        note(f"resume identical at 150/300 steps; {len(files)} CLI files byte-identical")
