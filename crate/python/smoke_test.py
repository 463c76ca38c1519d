"""Smoke test for the Python bindings. Run after `pip install -e crates/python`."""

import math

import stalestep as ss


def close(a, b, tol):
    assert abs(a - b) <= tol, f"{a} vs {b}"


def main():
    # Models
    pois = ss.StalenessModel("poisson:8")
    close(pois.pmf(8), 8**8 * math.exp(-8) / math.factorial(8), 1e-15)
    close(sum(pois.pmf_table()), 1.0, 1e-9)
    assert ss.StalenessModel.poisson(16).mode() == 15
    assert ss.StalenessModel.geometric(0.3).family == "geometric"

    # Fitting a sampled histogram
    hist = ss.Histogram.from_samples(pois.sample(20000, seed=1))
    fits = ss.fit(hist, "all", workers=9)
    assert {fits[0]["family"], fits[1]["family"]} == {"poisson", "cmp"}, fits
    close(fits[0]["distance"], hist.distance(ss.StalenessModel(str_model(fits[0]))), 1e-12)

    # Policies and drift identities
    cmp = ss.StalenessModel.cmp(8, 1)
    flat = ss.drift_report(cmp, ss.Policy("cmp-zero:1,0.01", cmp), 150)
    assert flat["check"]["claim"] == "flat" and flat["check"]["max_abs_d"] < 1e-10
    tuned = ss.Policy.geometric_tuned(0.2, 0.5, 0.01)
    rep = ss.drift_report(ss.StalenessModel.geometric(0.2), tuned, 50)
    close(rep["check"]["measured"], 0.5, 1e-9)
    close(ss.implied_momentum(0.2, ss.derive_c_for_momentum(0.2, 0.5)), 0.5, 1e-12)

    wrapped = ss.Policy("const:0.01").normalized(ss.Histogram({0: 50, 1: 30, 2: 20}), 0.01)
    close(wrapped.scale, 1.0, 1e-12)
    clipped = ss.Policy("inv-tau:0.08").clipped(mult=5, cutoff=150)
    close(clipped.step(0), 0.08, 1e-15)
    assert clipped.step(151) == 0.0

    # Bounds
    alpha, bound = ss.alpha_choice_and_bound(1, 1, 1, 0.01, d0=1, tau_bar=4, theta=1)
    close(alpha, 0.01 / 1.8, 1e-15)
    assert bound["t_ceil"] == 829

    # Engine
    cfg = {
        "mode": "sequential",
        "problem": {"kind": "quadratic", "spectrum": [1.0], "x_star": [0.0], "x0": [1.0], "sigma": 0.0},
        "policy": {"kind": "constant", "params": {"alpha": 0.1}},
        "steps": 50,
        "seed": 1,
    }
    r = ss.run(cfg)
    assert len(r) == 50
    close(r.final_x[0], 0.9**50, 1e-15)
    close(r.final_dist2, 0.9**100, 1e-15)
    summary = r.summary()
    assert summary["updates"] == 50 and summary["config"]["steps"] == 50
    again = ss.run(summary["config"])
    assert again.final_x == r.final_x

    sim = dict(cfg, mode="async-simulated", workers=8, steps=2000, stride=100,
               delay={"kind": "event-driven", "compute": {"dist": "exponential", "mean": 1.0}, "apply_time": 0.35})
    s = ss.run(sim)
    assert abs(s.histogram.mean() - 7) < 1.0, s.histogram

    try:
        ss.run(dict(cfg, steps=0))
    except ValueError:
        pass
    else:
        raise AssertionError("zero steps accepted")

    # Special functions
    close(ss.log_factorial(10), math.log(3628800), 1e-12)
    close(ss.cmp_normalizer(8, 1), math.exp(8), 1e-9 * math.exp(8))
    close(ss.regularized_upper_gamma(2, 1.0), 2 * math.exp(-1), 1e-15)

    print("python smoke test: OK")


def str_model(fit):
    p = fit["params"]
    return {
        "poisson": lambda: f"poisson:{p['lambda']}",
        "cmp": lambda: f"cmp:{p['lambda']},{p['nu']}",
        "geometric": lambda: f"geom:{p['p']}",
        "uniform": lambda: f"unif:{p['max']}",
    }[fit["family"]]()


if __name__ == "__main__":
    main()
