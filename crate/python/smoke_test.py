"""Smoke test for the Python bindings.

Build first:  pip install -e crates/python --no-build-isolation
"""

import math
import sys
import tempfile
from pathlib import Path

import opfse

ROOT = Path(__file__).resolve().parent.parent


def check(cond, msg):
    if not cond:
        print(f"FAIL: {msg}")
        sys.exit(1)
    print(f"ok: {msg}")


def main():
    feeder = opfse.Feeder.load(ROOT / "data" / "ieee37.csv")
    check(feeder.n == 36 and feeder.bus_ids[1] == 701, "IEEE-37 feeder loads with bus ids")

    zeros = [0.0] * feeder.n
    v = feeder.distflow(zeros, zeros)
    check(all(x == feeder.v_sub for x in v), "flat profile at zero injection")

    p = [0.05] * feeder.n
    q = [-0.02] * feeder.n
    err = max(abs(a - b) for a, b in zip(feeder.distflow(p, q), feeder.linear_voltage(p, q)))
    check(err < 0.01, f"linearization error {err:.2e} below 0.01")

    pp, qq = opfse.project_capability(3.0, 4.0, 1.0, 1.0)
    check(abs(pp - 0.6) < 1e-12 and abs(qq - 0.8) < 1e-12, "radial projection onto the rating disc")

    small = opfse.Feeder([(0, 1, 0.1, 0.1)], 1.0)
    z = opfse.wls_estimate(small, [1], [1.0], [1e4], [0.0], [0.0], [1.0], [1.0])
    check(len(z) == 2 and all(math.isfinite(x) for x in z), "closed-form estimate")

    g = opfse.cvar_constraint([1.045], [0.02, 0.0], [[0.0]], 0.1, 0.95, 1.045)
    check(abs(g[0] - 0.018) < 1e-12, "CVaR constraint value")

    cfg = ROOT / "configs" / "three_node_analysis.cfg"
    res = opfse.simulate(cfg, ["timeseries.duration_s=60"])
    check(len(res) == 60 and res.summary["steps"] == "60", "three-node simulation runs")
    with tempfile.TemporaryDirectory() as d:
        res.write(d)
        header = (Path(d) / "trajectory.csv").read_text().splitlines()[0]
        check(header.startswith("t_s,v_true_1"), "trajectory written")

    report = opfse.analyze(cfg)
    check(report["kkt.residual.satisfied"] == "true", "frozen-instance report")

    try:
        opfse.simulate(cfg, ["controller.bogus=1"])
        check(False, "unknown config key rejected")
    except ValueError as e:
        check("controller.bogus" in str(e), "unknown config key rejected")

    print("all smoke checks passed")


if __name__ == "__main__":
    main()
