"""Run every policy of a scenario on identical traffic and print a per-class table.

    python scripts/run_congestion.py [scenarios/congestion.scn]
"""

import sys
import time

from np_aqm.core import TrafficClass
from np_aqm.metrics import delay_stats, loss_rate
from np_aqm.scenario import load_scenario
from np_aqm.sim import run_policy


def main(path="scenarios/congestion.scn"):
    s = load_scenario(path)
    print(f"{path}: seed={s.seed} duration={s.duration_ns / 1e6:g} ms policies={', '.join(s.policies)}")
    header = f"{'policy':<9} {'class':<5} {'offered':>8} {'loss':>8} {'mean us':>9} {'p99 us':>9}"
    print(header)
    print("-" * len(header))
    for policy in s.policies:
        t0 = time.perf_counter()
        sim = run_policy(s, policy)
        c = sim.metrics
        for cls in (TrafficClass.EF, TrafficClass.AF, TrafficClass.BE):
            loss = loss_rate(c, cls)
            d = delay_stats(c, cls)
            loss_s = "-" if loss is None else f"{loss:.4f}"
            mean_s = "-" if d is None else f"{d['mean'] / 1e3:.1f}"
            p99_s = "-" if d is None else f"{d['p99'] / 1e3:.1f}"
            offered = len(c.offer_times.get(cls.name, []))
            print(f"{policy:<9} {cls.name:<5} {offered:>8} {loss_s:>8} {mean_s:>9} {p99_s:>9}")
        summ = sim.summary()
        print(f"{policy:<9} tail throughput {summ['tail_throughput_bps'] / 1e6:.1f} Mb/s, "
              f"audit ok={sim.audit.ok}, {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main(*sys.argv[1:])
