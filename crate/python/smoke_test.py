"""Quick end-to-end check of the Python bindings.

Build and install first, e.g. `pip install maturin && maturin develop -m crates/python/Cargo.toml`,
then run `python python/smoke_test.py`.
"""

import math
import tempfile
from pathlib import Path

import mfsgd


def main():
    cfg = mfsgd.SgdConfig(200, 1, seed=7)
    assert math.isclose(cfg.noise_scale(), 1 / 200)

    sim = mfsgd.Simulation(cfg)
    traces = sim.run(1.0, ["square", "norm2"], stride=0.25)
    grid, values = traces["square"]
    assert grid == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert all(math.isfinite(v) for v in values)
    assert sim.steps == 200 and math.isclose(sim.time, 1.0)
    assert math.isclose(sim.bracket("square"), values[-1])

    # same seed and replication, same weights
    again = mfsgd.Simulation(cfg)
    again.step(200)
    assert again.weights == sim.weights

    init = sim.weights[:100]
    traj = mfsgd.integrate_meanfield(init, 1, 1.0, q=500, seed=3, dt=0.05)
    ref = traj.reference_trace("square", [0.0, 0.5, 1.0])
    assert math.isclose(ref[0], sum(w * w for w in init) / len(init))
    c1 = mfsgd.gprocess_covariance("square", "square", traj, 1.0, 1.0, batch=1, q=500, seed=3)
    c4 = mfsgd.gprocess_covariance("square", "square", traj, 1.0, 1.0, batch=4, q=500, seed=3)
    assert c1 > 0 and math.isclose(c4 * 4, c1, rel_tol=1e-12)

    fl = mfsgd.fluctuation_trace(([0.0, 1.0], [1.0, 2.0]), ([0.0, 1.0], [1.0, 1.5]), 100)
    assert fl == ([0.0, 1.0], [0.0, 5.0])

    grid = [k / 10 for k in range(11)]
    low = [(grid, [0.01 * t + 0.1 * r for t in grid]) for r in range(3)]
    high = [(grid, [0.1 * r for _ in grid]) for r in range(3)]
    fit = mfsgd.drift_fit(low, high)
    assert math.isclose(fit["slope"], 0.01, rel_tol=1e-9)

    assert math.isclose(mfsgd.wasserstein1_1d([0.0, 1.0], [0.5, 1.5]), 0.5)

    exp = mfsgd.ExperimentConfig.preset("single-run")
    exp.set("sgd.n", "100")
    exp.set("t_end", "1")
    assert mfsgd.ExperimentConfig.parse(exp.serialize(), "single-run") == exp
    try:
        exp.set("sgd.alpha", "not-a-number")
    except ValueError:
        pass
    else:
        raise AssertionError("bad value accepted")

    with tempfile.TemporaryDirectory() as out:
        files = mfsgd.run_experiment(exp, out)
        header = Path(out, "traces.csv").read_text().splitlines()[0]
        assert header == "t,value,replication,probe,beta,N,seed", header
        assert any(f.endswith("config.txt") for f in files)

    print("smoke test ok")


if __name__ == "__main__":
    main()
