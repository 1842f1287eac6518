"""Why the rx2 wormhole only works from DR2 upwards.

A wormhole has to replay the uplink, wait for the gateway's rx1 answer and
replay that into the device's rx2 window, which opens exactly one second
after rx1.  Everything must fit into that second.
"""

import numpy as np

from lwsim.attacker import rx2_feasible
from lwsim.experiments import simulate_rx2_replay
from lwsim.frames import MicPolicy
from lwsim.phy import beacon_params, toa_table, time_on_air

# Airtime grid: rows are frame sizes, columns DR0..DR5, values in ms.
sizes = [12, 14, 17, 30]
grid = toa_table(sizes)
print("time on air (ms)")
print("bytes " + "".join(f"{'DR' + str(dr):>10}" for dr in range(6)))
for n, row in zip(sizes, grid):
    print(f"{n:5d} " + "".join(f"{v:10.1f}" for v in row))

# The beacon is a fixed SF9 frame; its airtime sets how far a drift must go.
print(f"\nbeacon airtime: {time_on_air(beacon_params(), 17) / 1000:.2f} ms")

# Budget: 150 ms to react, both frames on air, 50 ms to retune; 1 s available.
budget = 150 + grid[1] + grid[2] + 50
print("\nrx2 budget for 14 B up / 17 B down (ms):", np.round(budget).astype(int))
print("slack before rx2 opens (ms):          ", np.round(1000 - budget).astype(int))

# The static check and a full simulation agree.  Under the hardened MIC the
# replayed downlink still arrives in time but is refused.
print("\nDR  feasible  V1.1 landed  hardened rejected")
for dr in range(6):
    v11 = simulate_rx2_replay(dr)
    hard = simulate_rx2_replay(dr, policy=MicPolicy.HARDENED)
    print(f"{dr:2d}  {str(rx2_feasible(dr, 14, 17)):8s}  {str(v11.landed):11s}  {hard.rejected}")
