"""Dragging a Class B device off the network's beacon timing.

The attacker first locks onto the real beacon.  It then sends its own
beacon slightly earlier every period.  If each step stays inside the
device's beacon guard, the device follows.  Its ping slots then slide
away from the ones the server uses until no downlink arrives.  Larger
steps fall outside the guard, so the device loses the beacon, goes
beacon-less and later relocks to the real one.
"""

import collections

from lwsim.attacker import drift_periods
from lwsim.enddevice import BEACON_SYMBOL
from lwsim.experiments import run_beacon_spoofing
from lwsim.scenario import Scenario

scn = Scenario.builtin("beacon_drift")
rows = run_beacon_spoofing(scn, trials=3)

by_step = collections.defaultdict(lambda: collections.defaultdict(list))
for r in rows:
    by_step[r["step_size"]][r["period"]].append(r)

for step, periods in sorted(by_step.items()):
    print(f"\nstep {step} symbols ({step * BEACON_SYMBOL / 1000:.1f} ms), full drift after {drift_periods(step)} periods")
    line = []
    for p, rs in sorted(periods.items()):
        avail = sum(r["downlink_received"] for r in rs) / len(rs)
        line.append(f"{p}:{rs[0]['beacon_status'][0]}{int(100 * avail)}")
    # v/s/l = valid, spoofed, lost beacon; number = % of periods with a downlink
    print(" ".join(line))
