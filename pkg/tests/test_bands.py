import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from smartmc.bands import (JOINT, MIN_VAR_VOL, PINNED, RAW, PriceBand, model_risk_rel, price_band,
                           spread_metrics, write_bands_csv)
from smartmc.calibrator import calibrate
from smartmc.conic import CalibrationSpec
from smartmc.constraints import simplex_block
from smartmc.errors import DomainError
from smartmc.paths import HESTON_SET2, MERTON_SET2
from smartmc.pipeline import GridConfig, atm_strip, build_data, market_surface, rc_payoff, simulate

GRID = GridConfig(n_fixings=3, n_strikes=5, n_fwd_ratios=3)


@pytest.fixture(scope="module")
def setup():
    surf = market_surface(GRID, MERTON_SET2, n_paths=2 ** 14)
    ps = simulate(GRID, HESTON_SET2, 512, 4)
    return build_data(ps, GRID, surf), rc_payoff(ps, 0.5)


def test_spread_by_hand():
    m = spread_metrics(PriceBand(0.9, 1.1))
    assert m.mid == pytest.approx(1.0) and m.spread_rel == pytest.approx(20.0)
    z = spread_metrics(PriceBand(-1.0, 1.0))
    assert z.undefined and math.isnan(z.spread_rel)
    with pytest.raises(DomainError):
        PriceBand(1.0, 0.5)
    assert PriceBand(1.0 + 1e-13, 1.0).width == 0.0


def test_model_risk():
    assert model_risk_rel(1.1, 0.9) == pytest.approx(20.0)
    assert math.isnan(model_risk_rel(1.0, -1.0))


@given(st.floats(0.01, 10), st.floats(0.01, 10))
def test_model_risk_antisymmetric(a, b):
    assert model_risk_rel(a, b) == pytest.approx(-model_risk_rel(b, a))


def test_constant_payoff_has_zero_width(setup):
    data, _ = setup
    b = price_band(data, np.full(data.n_paths, 3.0), RAW)
    assert b.d_min == pytest.approx(3.0, abs=1e-9) and b.d_max == pytest.approx(3.0, abs=1e-9)


def test_unconstrained_band_is_payoff_range():
    F = np.array([0.3, -1.0, 2.0, 0.5])
    b = price_band([simplex_block(4)], F, RAW)
    assert (b.d_min, b.d_max) == pytest.approx((-1.0, 2.0), abs=1e-9)


def test_band_nesting(setup):
    data, F = setup
    raw = price_band(data, F, RAW)
    spec = CalibrationSpec(lambda_sigma=100.0, beta=0.0, mu=1e-3, vol_reference="flat")
    mv = price_band(data, F, MIN_VAR_VOL, spec=spec)
    jt = price_band(data, F, JOINT, reference=atm_strip(data), eps=1.0)
    m = calibrate(data, CalibrationSpec())
    pin = price_band(m, F, PINNED)
    tol = 1e-8
    assert raw.d_min - tol <= mv.d_min <= mv.d_max <= raw.d_max + tol
    assert raw.d_min - tol <= jt.d_min <= jt.d_max <= raw.d_max + tol
    assert raw.d_min - tol <= pin.mid <= raw.d_max + tol and pin.width == 0.0
    assert spread_metrics(raw).spread_rel >= spread_metrics(mv).spread_rel >= spread_metrics(jt).spread_rel
    # eps = 0 collapses the joint band onto the calibrated weights
    j0 = price_band(data, F, JOINT, eps=0.0)
    assert j0.width == 0.0 and j0.mid == pytest.approx(pin.mid, abs=1e-8)


def test_mode_errors(setup):
    data, F = setup
    with pytest.raises(DomainError):
        price_band(data, F, PINNED)
    with pytest.raises(DomainError):
        price_band(data, F, JOINT, eps=0.5)
    with pytest.raises(DomainError):
        price_band([simplex_block(512)], F, MIN_VAR_VOL)
    with pytest.raises(DomainError):
        price_band(data, F, "wide")


def test_bands_csv(tmp_path):
    write_bands_csv([PriceBand(0.9, 1.1, "heston", 12, RAW)], tmp_path / "b.csv")
    rows = (tmp_path / "b.csv").read_text().splitlines()
    assert rows[0] == "generator,l,regime,D_min,D_max,mid,S_intra_rel"
    assert rows[1].startswith("heston,12,raw,0.9,1.1,1.0,")
