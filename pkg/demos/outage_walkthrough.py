"""One outage on the bundled 123-bus feeder, seen by the power flow and the PH weights.

    python3 demos/outage_walkthrough.py
"""
import numpy as np

from phgrid import powerflow
from phgrid.cli import open_network
from phgrid.env import EnvConfig, GridEnv
from phgrid.grid import effective_adjacency, islands
from phgrid.scenarios import generate, select_centers, validate
from phgrid.seeding import stream
from phgrid.tda import laplacian, ph_edge_weights

g = open_network("ieee123_modified")
print(f"{g.n_nodes} buses, {g.n_lines} lines, {len(g.switches)} switches, "
      f"{g.total_demand_kw:.0f} kW demand")

base = powerflow.solve(g)
print(f"default state: supplied {powerflow.energy_supplied(base, g):.3f}")

# first valid outage from the scenario stream
env = GridEnv(g, EnvConfig(variant="plain"))
rng = stream(0, "scenarios")
centers = select_centers(g, 25)
sc = next(s for s in generate(g, centers, 50, rng) if validate(s, env))
print(f"outage at bus {sc.center}, severity {sc.severity:.3f}, lines {sorted(sc.failed_lines)}")

res = powerflow.solve(g, outage=sc.failed_lines)
parts = islands(effective_adjacency(g, None, sc.failed_lines))
print(f"islands after outage: {len(parts)} (sizes {sorted(map(len, parts), reverse=True)[:5]})")
print(f"supplied after outage: {powerflow.energy_supplied(res, g):.3f}")

# topological edge weights: 1 near structurally similar neighbourhoods, lower across changes
w0 = ph_edge_weights(g, k=2)
w1 = ph_edge_weights(g, outage=sc.failed_lines, k=2)
edges = np.nonzero(np.triu(effective_adjacency(g, None, sc.failed_lines), 1))
delta = np.abs(w1.matrix - w0.matrix)[edges]
print(f"PH weights: {len(delta)} edges, mean {w1.matrix[edges].mean():.4f}, "
      f"{int((delta > 1e-12).sum())} changed by the outage (max {delta.max():.4f})")
ev = np.linalg.eigvalsh(laplacian(w1))
print(f"normalised Laplacian spectrum in [{abs(ev.min()):.3f}, {ev.max():.3f}], "
      f"{int((ev < 1e-9).sum())} zero eigenvalues (one per island)")
