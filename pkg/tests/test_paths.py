import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from smartmc.errors import DomainError
from smartmc.paths import (HESTON_SET1, HESTON_SET2, MERTON_SET1, MERTON_SET2, ModelSpec, PathSet,
                           generate_paths, jump_moments, merton_to_heston, monthly_grid)

# two-sided Poisson mixture of Black prices (40 x 40 terms, quadrature legs), frozen
MERTON1_ATM_1Y = 11.682896259662456
MERTON2_ATM_1Y = 8.771441463239993


def sig4(x):
    return float(f"{x:.4g}")


@pytest.mark.parametrize("merton, heston", [(MERTON_SET1, HESTON_SET1), (MERTON_SET2, HESTON_SET2)])
def test_merton_to_heston_tables(merton, heston):
    h = merton_to_heston(merton)
    for k in ("v0", "theta", "kappa", "rho"):
        assert sig4(getattr(h, k)) == sig4(getattr(heston, k))
        assert getattr(h, k) == pytest.approx(getattr(heston, k), abs=5e-5)
    assert sig4(h.eta) == sig4(heston.eta)


def test_merton_to_heston_jump_free():
    h = merton_to_heston(ModelSpec.merton(0.25, 0.0, 1.2, 0.0, 0.8))
    assert h.v0 == pytest.approx(0.0625) and h.kappa == 2.0 and h.eta == 0.0 and h.rho == 0.0
    assert jump_moments(ModelSpec.merton(0.25, 0.0, 1.2, 0.0, 0.8)) == (0.0, 0.0, 0.0)


@given(st.floats(0.05, 0.5), st.floats(0.0, 3.0), st.floats(1.01, 2.0), st.floats(0.0, 3.0),
       st.floats(0.2, 0.99))
def test_eta_cap_always_holds(sigma, lu, ju, ld, jd):
    h = merton_to_heston(ModelSpec.merton(sigma, lu, ju, ld, jd))
    assert h.eta <= 0.95 * math.sqrt(2 * h.kappa * h.theta) * (1 + 1e-15)
    assert -1.0 <= h.rho <= 1.0


@pytest.mark.parametrize("spec", [ModelSpec.merton(0.2, 0.1, 0.9, 0.1, 0.5),
                                  ModelSpec.merton(0.2, 0.1, 1.3, 0.1, 1.2),
                                  ModelSpec.heston(0.04, 1.0, 0.04, -1.5, 0.3),
                                  ModelSpec.heston(-0.01, 1.0, 0.04, 0.0, 0.3),
                                  ModelSpec.black(-0.1), ModelSpec("sabr")])
def test_invalid_specs(spec):
    with pytest.raises(DomainError):
        spec.validate()


def test_zero_vol_black_is_constant():
    ps = generate_paths(ModelSpec.black(0.0), monthly_grid(4), 64, 1)
    assert np.all(ps.levels == 100.0)


def test_black_terminal_mean_clt():
    n = 2 ** 15
    ps = generate_paths(ModelSpec.black(0.2), [0.0, 1.0], n, 7)
    assert abs(ps.levels[:, -1].mean() - 100.0) <= 3 * 0.2 * 100 / math.sqrt(n) * 1.1


@pytest.mark.parametrize("spec, ref", [(MERTON_SET1, MERTON1_ATM_1Y), (MERTON_SET2, MERTON2_ATM_1Y)])
@pytest.mark.parametrize("sampler", ["pseudo", "sobol"])
def test_merton_atm_call_against_series(spec, ref, sampler):
    n = 2 ** 15
    ps = generate_paths(spec, monthly_grid(12), n, 3, sampler)
    pay = np.maximum(ps.levels[:, -1] - 100.0, 0.0)
    se = pay.std(ddof=1) / math.sqrt(n)
    assert abs(pay.mean() - ref) <= 3 * se


@pytest.mark.parametrize("spec, sampler", [(HESTON_SET1, "pseudo"), (HESTON_SET2, "pseudo"),
                                           (MERTON_SET1, "sobol"), (MERTON_SET1, "pseudo")])
def test_martingale_each_fixing(spec, sampler):
    n = 2 ** 13
    ps = generate_paths(spec, monthly_grid(12), n, 11, sampler)
    s = ps.levels[:, 1:]
    se = s.std(axis=0, ddof=1) / math.sqrt(n)
    assert np.all(np.abs(s.mean(axis=0) - 100.0) <= 4 * se)


def test_determinism_and_thread_independence():
    t = monthly_grid(6)
    a = generate_paths(HESTON_SET2, t, 9000, 42)
    b = generate_paths(HESTON_SET2, t, 9000, 42, threads=3)
    c = generate_paths(HESTON_SET2, t, 9000, 43)
    assert np.array_equal(a.levels, b.levels)
    assert not np.array_equal(a.levels, c.levels)
    s1 = generate_paths(MERTON_SET2, t, 1000, 42, "sobol")
    s2 = generate_paths(MERTON_SET2, t, 1000, 42, "sobol")
    assert np.array_equal(s1.levels, s2.levels)


def test_sobol_refused_for_heston():
    with pytest.raises(DomainError):
        generate_paths(HESTON_SET1, monthly_grid(2), 128, 1, "sobol")


@pytest.mark.parametrize("times", [[0.0, 0.5, 0.5], [0.1, 0.2], [0.0, -0.1]])
def test_bad_grids(times):
    with pytest.raises(DomainError):
        generate_paths(ModelSpec.black(0.2), times, 16, 1)


def test_save_load_roundtrip(tmp_path):
    ps = generate_paths(MERTON_SET1, monthly_grid(3), 100, 5, "sobol", rate=0.01)
    ps.save(tmp_path / "p.bin")
    back = PathSet.load(tmp_path / "p.bin")
    assert np.array_equal(back.levels, ps.levels) and np.array_equal(back.times, ps.times)
    assert back.spec == ps.spec and back.seed == 5 and back.sampler == "sobol" and back.rate == 0.01


def test_load_rejects_corrupt_header(tmp_path):
    ps = generate_paths(ModelSpec.black(0.2), monthly_grid(2), 10, 5)
    ps.save(tmp_path / "p.bin")
    raw = bytearray((tmp_path / "p.bin").read_bytes())
    raw[:4] = b"XXXX"
    (tmp_path / "p.bin").write_bytes(bytes(raw))
    with pytest.raises(Exception):
        PathSet.load(tmp_path / "p.bin")


def test_pathset_helpers():
    ps = generate_paths(ModelSpec.black(0.2), monthly_grid(3), 10, 5, rate=0.02, dividend=0.01)
    assert ps.n_paths == 10 and ps.n_fixings == 3 and ps.s0 == 100.0
    assert ps.forward(1.0) == pytest.approx(100 * math.exp(0.01))
    assert ps.discount(1.0) == pytest.approx(math.exp(-0.02))
    assert ps.time_index(2 / 12) == 2
    with pytest.raises(DomainError):
        ps.time_index(0.3)
    perm = np.arange(10)[::-1]
    assert np.array_equal(ps.permuted(perm).levels, ps.levels[::-1])
