"""One simulated day on the desk scenario under the three fixed policies.

The uncoordinated (greedy) policy charges every parked EV at full rate, which
meets demand but drags voltages down; the zero policy never charges; the random
policy sits in between. These are the reference points the learner is judged
against.

    python demos/baselines_one_day.py
"""
from voltgrid.data import load_scenario
from voltgrid.learner.train import evaluate

scenario = load_scenario("desk_33bus")
print(f"{scenario.n_evcs} stations x {scenario.chargers.count} chargers, {scenario.horizon} five-minute steps\n")
print(f"{'policy':8s} {'energy $':>9s} {'violation':>10s} {'unmet kWh/EV':>13s} {'objective':>10s}")
for name in ("zero", "random", "greedy"):
    m = evaluate(name, scenario, episodes=3)["summary"]
    print(
        f"{name:8s} {m['energy_cost'][0]:9.1f} {m['avg_voltage_violation'][0]:10.4f}"
        f" {m['avg_demand_dissatisfaction'][0]:13.2f} {m['objective'][0]:10.1f}"
    )
