"""How much EV charging the 33-bus feeder can take before voltages sag out of band.

Solves the bundled feeder at its nominal load, then adds charging load at the
four station buses in 22 kW steps and reports the lowest bus voltage.

    python demos/feeder_voltage_profile.py
"""
import numpy as np

from voltgrid.grid import load_network, solve_power_flow
from voltgrid.signals import voltage_violation

net = load_network("ieee33")
p, q = net.base_injection_pu()
base = solve_power_flow(net, p, q)
worst = int(np.argmin(base.voltages))
print(f"nominal load: min |V| = {base.voltages.min():.4f} p.u. at bus {net.bus_ids[worst]} ({base.iterations} sweeps)")

stations = [8, 12, 14, 30]
idx = [net.index[b] for b in stations]
print("\nchargers busy per station -> min |V|, summed band violation")
for n_busy in (0, 2, 5, 10):
    extra = np.zeros(net.n_bus)
    extra[idx] = n_busy * 22.0 / net.base_kva
    r = solve_power_flow(net, p - extra, q)
    print(f"  {n_busy:2d} x 22 kW: {r.voltages.min():.4f} p.u., violation {voltage_violation(r.voltages, 0.95, 1.05):.4f}")
