"""Quick end-to-end check of the otspc Python module.

Build and install first:
    pip install --no-build-isolation -e crates/python
"""

import json
import os
import sys

import otspc

HERE = os.path.dirname(os.path.abspath(__file__))
SCENARIOS = os.path.join(HERE, "..", "scenarios")


def main():
    txs, total = otspc.weights()
    assert total == 2405, total
    assert [w for _, w in txs] == [417, 1196, 792], txs

    cells, dilemma = otspc.payoff(8, 2, 4)
    cells = dict(cells)
    assert dilemma
    assert cells[("defect", "defect")] == (-5.0, -5.0), cells

    updates, days, years = otspc.capacity(32, 10.0)
    assert updates == 2**32 and round(years, 2) == 13.62, (updates, years)

    report = json.loads(otspc.run_scenario(os.path.join(SCENARIOS, "fig2_cheat.json")))
    assert all(a["passed"] for a in report["assertions"]), report["assertions"]
    assert not report["violations"]

    for level in (2, 3):
        r = json.loads(otspc.run_scenario(os.path.join(SCENARIOS, "fig2_cheat.json"), level=level))
        assert r["level"] in (level, f"L{level}"), r["level"]

    sim = otspc.Simulation(json.dumps({"seed": 5, "alice_history": True}))
    for _ in range(10):
        sim.pay("alice", 1000)
    isn, a_bal, b_bal = sim.state("bob")
    assert (isn, a_bal, b_bal) == (10, 490000, 510000), (isn, a_bal, b_bal)
    sim.exit_with_state("alice", 3)
    assert sim.run_until_resolved(300)
    sim.run_ticks(2)
    assert sim.resolution() == "PunishAlice", sim.resolution()
    assert sim.payout("bob") == 1_000_000
    assert sim.violations() == []

    try:
        otspc.capacity(0, 1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("bits=0 accepted")

    print("smoke test ok")


if __name__ == "__main__":
    sys.exit(main())
