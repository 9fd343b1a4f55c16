import math

import numpy as np
import pytest
from scipy.stats import norm

from smartmc.black import bs_call_price
from smartmc.errors import DomainError, PreconditionError
from smartmc.paths import MERTON_SET1, ModelSpec
from smartmc.surface import (MfivAnchor, SurfaceArbitrageError, butterfly, digital_targets, load_surface,
                             mfiv, mfiv_anchor, synth_surface, validate_surface)


def black_rows(sigma=0.2, mats=(0.5, 1.0), ks=np.arange(80.0, 121.0, 5.0)):
    return [(t, k, bs_call_price(forward=100.0, strike=k, vol=sigma, tau=t)) for t in mats for k in ks]


def test_flat_black_surface_passes():
    s = validate_surface(black_rows(), 100.0)
    assert s.maturities.tolist() == [0.5, 1.0]
    assert s.call(1.0, 100.0) == pytest.approx(7.9655674554057985)


def test_bumped_price_flags_butterfly_at_that_triple():
    rows = black_rows(mats=(1.0,))
    i = 4                                        # K = 100
    t, k, c = rows[i]
    rows[i] = (t, k, c * 1.05)
    # by hand: C(95) - 2 * 1.05 C(100) + C(105) on an even 5-wide grid
    c95, c105 = rows[3][2], rows[5][2]
    expected = c95 - 2 * 1.05 * c + c105
    assert expected < 0
    with pytest.raises(SurfaceArbitrageError) as ei:
        validate_surface(rows, 100.0)
    fly = [v for v in ei.value.violations if v.kind == "butterfly"]
    assert [v.strikes for v in fly] == [(95.0, 100.0, 105.0)]
    assert fly[0].value == pytest.approx(expected, rel=1e-12)


def test_monotone_and_bound_violations():
    rows = black_rows(mats=(1.0,))
    rows[2] = (1.0, 90.0, rows[1][2] + 1.0)         # C(90) > C(85)
    with pytest.raises(SurfaceArbitrageError) as ei:
        validate_surface(rows, 100.0)
    assert any(v.kind == "monotone" for v in ei.value.violations)
    rows = black_rows(mats=(1.0,))
    rows[0] = (1.0, 80.0, 10.0)                     # below intrinsic 20
    with pytest.raises(SurfaceArbitrageError) as ei:
        validate_surface(rows, 100.0)
    assert any(v.kind == "bounds" for v in ei.value.violations)


def test_two_strikes_is_a_precondition_error():
    with pytest.raises(PreconditionError):
        validate_surface(black_rows(ks=[95.0, 105.0]), 100.0)


def test_butterfly_even_grid():
    assert butterfly(1, 2, 3, 5.0, 3.0, 2.0) == pytest.approx(5 - 6 + 2)


def test_synth_black_closed_form_and_mc():
    s = synth_surface(ModelSpec.black(0.2), [1.0], [90.0, 100.0, 110.0])
    assert s.call(1.0, 100.0) == pytest.approx(7.9655674554057985, abs=1e-12)
    n = 2 ** 16
    m = synth_surface(ModelSpec.black(0.2), [1.0], [90.0, 100.0, 110.0], n_paths=n, closed_form=False)
    # ATM payoff std under Black 0.2 is about 11.3
    assert abs(m.call(1.0, 100.0) - 7.9655674554057985) < 3 * 11.3 / math.sqrt(n)
    z = synth_surface(ModelSpec.black(0.0), [1.0], [90.0, 100.0, 110.0])
    np.testing.assert_array_equal(z.calls[0], [10.0, 0.0, 0.0])


def test_merton_atm_above_black():
    m = synth_surface(MERTON_SET1, [1.0], [90.0, 100.0, 110.0], n_paths=2 ** 15)
    assert m.call(1.0, 100.0) > bs_call_price(forward=100, strike=100, vol=0.2, tau=1.0) + 1.0


def test_digital_close_to_n_d2():
    ks = np.linspace(99.0, 101.0, 201)
    s = synth_surface(ModelSpec.black(0.2), [1.0], ks)
    d = digital_targets(s, eps=0.01, strikes=[100.0])
    assert d.prices[0][0] == pytest.approx(norm.cdf(-0.1), abs=1e-6)


def test_digitals_bounded_and_grid_checked():
    s = validate_surface(black_rows(), 100.0)
    d = digital_targets(s)
    for p in d.prices:
        assert np.all((p >= 0) & (p <= 1))
    assert d.eps.tolist() == [5.0, 5.0]
    with pytest.raises(DomainError):
        digital_targets(s, eps=20.0)


def test_digital_spread_quotient_monotone_in_eps():
    s = synth_surface(ModelSpec.black(0.2), [1.0], np.linspace(90, 110, 401))
    vals = [digital_targets(s, eps=e, strikes=[100.0]).prices[0][0] for e in (8.0, 4.0, 2.0, 1.0)]
    assert np.all(np.diff(vals) > 0) or np.all(np.diff(vals) < 0)
    assert abs(vals[-1] - norm.cdf(-0.1)) < abs(vals[0] - norm.cdf(-0.1))


def test_mfiv_wide_grid_and_truncation():
    ks = np.arange(50.0, 201.0, 1.0)
    cs = [bs_call_price(forward=100, strike=k, vol=0.2, tau=1.0) for k in ks]
    v, info = mfiv(ks, cs, 1.0, 100.0)
    assert abs(v / 0.04 - 1) < 0.02
    kt = np.arange(90.0, 111.0, 1.0)
    vt, it = mfiv(kt, [bs_call_price(forward=100, strike=k, vol=0.2, tau=1.0) for k in kt], 1.0, 100.0)
    assert vt < v and it["k_min"] == 90.0 and it["q_low_end"] > 0
    z, _ = mfiv(ks, np.maximum(100 - ks, 0.0), 1.0, 100.0)
    assert z == 0.0


def test_mfiv_refinement_converges():
    errs = []
    for step in (8.0, 4.0, 2.0, 1.0):
        ks = np.arange(20.0, 400.0 + step / 2, step)
        cs = [bs_call_price(forward=100, strike=k, vol=0.2, tau=1.0) for k in ks]
        errs.append(abs(mfiv(ks, cs, 1.0, 100.0)[0] - 0.04))
    assert all(b <= a for a, b in zip(errs, errs[1:]))


def test_anchor_roundtrip(tmp_path):
    s = validate_surface(black_rows(mats=(0.25, 0.5, 1.0), ks=np.arange(40.0, 250.0, 2.0)), 100.0)
    a = mfiv_anchor(s)
    assert a.calendar_ok
    a.to_csv(tmp_path / "a.csv")
    b = MfivAnchor.from_csv(tmp_path / "a.csv")
    np.testing.assert_allclose(b.variance, a.variance, rtol=1e-15)
    assert a.at(0.5) == pytest.approx(0.04, rel=0.02)
    with pytest.raises(DomainError):
        a.at(0.7)


def test_load_surface_csv_and_json(tmp_path):
    s = validate_surface(black_rows(), 100.0)
    s.to_csv(tmp_path / "s.csv")
    s.to_json(tmp_path / "s.json")
    a = load_surface(tmp_path / "s.csv", 100.0)
    b = load_surface(tmp_path / "s.json")
    for x in (a, b):
        np.testing.assert_array_equal(x.calls[1], s.calls[1])
    with pytest.raises(FileNotFoundError, match="nope.csv"):
        load_surface(tmp_path / "nope.csv", 100.0)
    (tmp_path / "bad.csv").write_text("maturity,strike\n1,100\n", encoding="utf-8")
    with pytest.raises(DomainError):
        load_surface(tmp_path / "bad.csv", 100.0)
