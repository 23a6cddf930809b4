"""Smoke test for the ionreadout_py extension.

Build and install first:
    maturin develop --release -m crates/python/Cargo.toml
"""

import math
import sys
import tempfile
from pathlib import Path

import ionreadout_py as ir


def check(cond, what):
    if not cond:
        sys.exit(f"FAIL: {what}")
    print(f"ok: {what}")


def main():
    ee = ir.airy_encircled_energy(ir.airy_first_null_diameter_um() / 2)
    check(abs(ee - 0.838) < 0.005, f"Airy energy at first null {ee:.4f}")
    check(abs(ir.airy_first_null_diameter_um() - 1.9) < 0.05, "first-null diameter")

    theta, err = ir.optimize_threshold([0, 1, 5, 10], [10, 5, 1, 0])
    check(theta == 2 and err > 0, f"threshold {theta} error {err:.3f}")

    pd1 = math.exp(ir.spatiotemporal_log_pd([math.log(0.3)], [math.log(0.6)], 1e-3, 1.0))
    check(abs(pd1 - (0.999 * 0.6 + 0.001 * 0.3)) < 1e-12, "one-exposure decay mixture")

    cfg = ir.Config("qunybble", seed=3)
    near = ir.crosstalk_fraction(cfg, 1, 2, 14.0) / ir.crosstalk_fraction(cfg, 1, 1, 14.0)
    check(abs(near - 0.04) < 0.002, f"nearest-neighbour cross-talk {near:.4f}")

    cfg = ir.Config("single_exposure", seed=11)
    cfg.trials = 2000
    with tempfile.TemporaryDirectory() as d:
        w, h, frames, labels = ir.simulate(cfg, out_dir=d)
        check(len(frames) == 2000 and len(frames[0]) == w * h, "simulated frames")
        check(labels[0][0] in "01", "label lines")
        w2, h2, back = ir.read_irf1(str(Path(d) / "frames.irf1"))
        check((w2, h2) == (w, h) and back == frames, "IRF1 round trip")

    text = cfg.to_toml()
    again = ir.Config.from_toml(text)
    check(again.trials == 2000 and again.experiment == "single_exposure", "TOML round trip")

    reports, derived = ir.run(cfg)
    ml = [r for r in reports if r.method == "M"]
    check(ml and min(r.epsilon for r in ml) < 0.01, "ML error at 2000 trials")
    check(derived["code_version"].startswith("ionreadout"), "derived values")

    try:
        ir.Config("no_such_experiment", seed=1)
    except ValueError:
        print("ok: bad experiment rejected")
    else:
        sys.exit("FAIL: bad experiment accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
