"""Train a small learner on the two-bus smoke scenario and compare it with the baselines.

A few dozen iterations on the tiny scenario take well under a minute; the
learning curve lands in ``demo_run/train_log.csv`` and can be plotted with
``voltgrid report demo_run``.

    python demos/train_and_compare.py [iterations]
"""
import sys

from voltgrid.config import from_dict
from voltgrid.learner import AgentPolicy, evaluate, load_agent, train

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 30
cfg = from_dict({
    "scenario": "smoke_2bus",
    "iterations": iterations,
    "encoder": {"variant": "attention", "layers": 1, "model_dim": 16, "heads": 2, "window": 4},
    "actor_hidden": 32,
    "critic_hidden": 32,
    "minibatch": 64,
    "checkpoint_every": 0,
})
res = train(cfg, "demo_run", resume=False)
last = res.log_rows[-1]
print(f"after {iterations} iterations: lambda {float(last['lambda']):.3g}, episode reward {float(last['mean_reward']):.2f}")

agent, _ = load_agent("demo_run/latest.ckpt", "smoke_2bus")
for name, policy in (("learned", AgentPolicy(agent)), ("greedy", "greedy"), ("random", "random")):
    m = evaluate(policy, "smoke_2bus", episodes=10)["summary"]
    print(f"  {name:8s} objective {m['objective'][0]:8.2f}  unmet {m['avg_demand_dissatisfaction'][0]:.2f} kWh/EV")
