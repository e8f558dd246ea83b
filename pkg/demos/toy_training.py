"""Train the PH and plain policies on the 15-bus toy feeder and compare them greedily.

    python3 demos/toy_training.py [total_steps]

About a minute per variant at the default 30000 steps.
"""
import sys

import numpy as np

from phgrid import evaluate as ev
from phgrid.cli import open_network
from phgrid.env import EnvConfig, GridEnv
from phgrid.policy import GcapcnConfig, GcapcnPolicy
from phgrid.ppo import PPOTrainer, TrainConfig
from phgrid.scenarios import dedupe, generate, select_centers, split_disjoint, validate
from phgrid.seeding import stream

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 30_000
g = open_network("toy15")
plain = GridEnv(g, EnvConfig(variant="plain"))
pool = [s for s in dedupe(generate(g, select_centers(g, 15), 5000, stream(0, "scenarios")))
        if validate(s, plain)]
train, test = split_disjoint(pool, len(pool) // 2, stream(0, "split"))
print(f"{len(pool)} distinct valid scenarios: {len(train)} train, {len(test)} held out")

pcfg = GcapcnConfig(embed_dim=16, hidden=(16, 16))
tcfg = TrainConfig(total_steps=steps, rollout_length=1024, minibatch_size=128, epochs=4,
                   lr=1e-3, seed=0)
records = {}
for variant in ("ph", "plain"):
    env = GridEnv(g, EnvConfig(variant=variant))
    policy = GcapcnPolicy(pcfg, g.n_nodes, g.n_lines, env.n_actions, stream(0, "init"))
    trainer = PPOTrainer(env, policy, tcfg, train)
    trainer.train()
    recent = [r for _, r in trainer.episodes[-100:]]
    records[variant], summary = ev.evaluate(policy, test, env)
    print(f"{variant:5s} train episode return {np.mean(recent):.3f}  "
          f"held-out reward {summary['reward'][0]:.3f} +- {summary['reward'][1]:.3f}")

_, report = ev.compare(records["ph"], records["plain"], "ph", "plain")
print(report, end="")
