"""Smoke test for the `leap` Python extension.

Build and install first:  pip install -e crates/python --no-build-isolation
"""

import json
import math
import sys

import leap


def main() -> int:
    snap = leap.generate_snapshot(area_km2=0.5, macros=4, picos=1, density=200.0, seed=3)
    assert snap.num_cells == 5 and snap.num_ues > 0, snap
    assert leap.Snapshot.from_json(snap.to_json()).content_hash() == snap.content_hash()

    stats = leap.build_statistics(snap, bin_width_db=1.0)
    assert stats.num_cells > 0
    for _, _, occupancy in stats.edges():
        assert 0.0 < occupancy <= 1.0

    sl = leap.solve_sl(stats, iterations=500, seed=1)
    ce = leap.solve_ce(stats)
    base, i_nominal = leap.best_fa_fpc(stats, snap)
    assert sl.provenance == "sl" and ce.provenance == "ce" and base.provenance == "fa_fpc"
    assert i_nominal in (5.0, 10.0, 15.0)
    for cell, p0, alpha, i_star, _ in sl.cells():
        assert 0.0 <= alpha <= 1.0 and p0 <= 0.1 + 1e-12 and i_star > 0.0

    report = leap.evaluate(sl, snap)
    reference = leap.evaluate(base, snap)
    pct = report.percentiles()
    values = [pct[k] for k in sorted(pct, key=float)]
    assert values == sorted(values)
    gains = dict(leap.gain_table(report, reference))
    print("median rate %.3f vs baseline %.3f (gain %.2fx)" % (report.median, reference.median, gains[50.0]))

    assert abs(leap.data_rate(10.0) - math.log2(11.0)) < 1e-12
    ghat = leap.g_hat(math.log(1e-3), 1.0, [math.log(1e8), math.log(1e10)], [[1.9087, 0.0], [0.0, 1.9087]])
    assert abs(ghat - 6.74e-5) < 1e-7

    sol = leap.Solution.from_json(sl.to_json())
    assert json.loads(sol.to_json())["schema_version"] == 1
    print("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
