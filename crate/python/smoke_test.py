"""Smoke test for the nsfixedb Python bindings.

Build and install first:
    maturin develop -m crates/python/Cargo.toml --release
"""

import json
import math

import nsfixedb_py as nf


def main():
    spec = nf.DgpSpec.variance_break(1.0, 4.0, 0.5)
    assert spec.p == 1
    assert abs(spec.integrated_omega()[0][0] - 2.5) < 1e-9

    sample = spec.simulate(400, 7)
    assert len(sample) == 400
    again = spec.simulate(400, 7)
    assert sample.y == again.y

    fit = sample.fit()
    ps = fit.bartlett_partial_sums().scalar()
    direct = fit.fixed_b_lrv("bartlett", 1.0).scalar()
    assert abs(ps - direct) <= 1e-10 * max(1.0, abs(ps)), (ps, direct)

    t = fit.t_stat("fixed-b", "bartlett", 1.0, value=fit.beta_hat[0])
    assert abs(t) < 1e-8

    curve = fit.local_lrv_curve(n_u=20)
    assert len(curve.grid) == 20 and all(w > 0 for w in curve.omega)

    stat = fit.t_stat("fixed-b", "bartlett", 1.0)
    draws = nf.stationary_draws("bartlett", 1.0, draws=2000, seed=1, grid_n=200)
    cv, se = draws.critical_value(0.05)
    assert 3.0 < cv < 6.5 and se > 0
    decision = json.loads(draws.decide(stat, 0.05))
    assert decision["reject"] == (abs(stat) > decision["cv"])

    plug = curve.plug_in_draws("bartlett", 1.0, draws=1000, seed=2, grid_n=200)
    assert len(plug) == 1000

    mu = nf.mean_g_b(nf.DgpSpec.stationary_ar1(0.0, 1.0), "bartlett", 1.0)
    assert abs(mu - 1.0 / 3.0) < 1e-6

    k2, k3, k4 = nf.cumulants(spec, "bartlett", 0.2)
    assert k2 > 0 and all(math.isfinite(k) for k in (k3, k4))

    try:
        nf.stationary_draws("bartlett", 1.5)
    except nf.NsfixedbError:
        pass
    else:
        raise AssertionError("b > 1 should be rejected")

    print("smoke test ok")


if __name__ == "__main__":
    main()
