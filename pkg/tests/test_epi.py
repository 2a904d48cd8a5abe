import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stelar.epi import (
    SeirConfig,
    SirConfig,
    new_infections_curve,
    seir_simulate,
    sir_simulate,
)


def test_no_infected_stays_put():
    tr = sir_simulate(SirConfig(s0=0.9, i0=0.0, beta=0.5, gamma=0.2, horizon=10))
    assert np.all(tr.S == 0.9)
    assert not tr.I.any() and not tr.new_infections.any()


def test_first_step_by_hand():
    # beta=0.4, gamma=0.1 from S(0)=0.95, I(0)=0.05
    tr = sir_simulate(SirConfig(s0=0.95, i0=0.05, beta=0.4, gamma=0.1, horizon=50))
    assert tr.new_infections[0] == pytest.approx(0.019, abs=1e-15)
    assert tr.S[1] == pytest.approx(0.931, abs=1e-15)
    assert tr.I[1] == pytest.approx(0.064, abs=1e-15)
    assert tr.R[0] == 0 and tr.R[1] == pytest.approx(0.005, abs=1e-15)
    assert len(tr.new_infections) == 50


def test_zero_beta_geometric_decay():
    tr = sir_simulate(SirConfig(s0=0.7, i0=0.2, beta=0.0, gamma=0.3, horizon=12))
    np.testing.assert_allclose(tr.I, 0.2 * 0.7 ** np.arange(13), rtol=1e-12)
    assert not tr.new_infections.any()


def test_new_infections_curve_is_c_component():
    cfg = SirConfig(0.95, 0.05, 0.4, 0.1, 30)
    np.testing.assert_array_equal(new_infections_curve(cfg), sir_simulate(cfg).new_infections)


def test_seir_nothing_infected():
    tr = seir_simulate(SeirConfig(0.8, 0.0, 0.6, 0.2, 15, e0=0.0, sigma=0.3))
    for comp in (tr.S, tr.E, tr.I, tr.R):
        assert np.all(comp == comp[0])


def test_seir_fast_progression_step():
    tr = seir_simulate(SeirConfig(0.9, 0.0, 0.5, 0.2, 5, e0=0.1, sigma=1.0))
    assert tr.I[1] == pytest.approx(0.1)
    assert tr.E[1] == pytest.approx(0.0)


def test_seir_zero_sigma_decouples():
    tr = seir_simulate(SeirConfig(0.6, 0.1, 0.3, 0.25, 20, e0=0.2, sigma=0.0))
    np.testing.assert_allclose(tr.I, 0.1 * 0.75 ** np.arange(21), rtol=1e-12)
    assert np.all(tr.E >= 0.2 - 1e-15)


def test_rejects_negative_config():
    with pytest.raises(ValueError):
        SirConfig(0.9, 0.1, -0.1, 0.1, 5)
    with pytest.raises(ValueError):
        SirConfig(0.9, 0.1, 0.1, 0.1, 0)
    with pytest.raises(ValueError):
        SeirConfig(0.9, 0.1, 0.1, 0.1, 5, sigma=-1.0)


unit = st.floats(min_value=0.0, max_value=1.0)


@st.composite
def sir_configs(draw):
    s0, i0 = draw(unit), draw(unit)
    total = s0 + i0
    beta = draw(unit) / max(total, 1.0)  # beta * total <= 1
    return SirConfig(s0, i0, beta, draw(unit), horizon=500)


@settings(max_examples=40, deadline=None)
@given(cfg=sir_configs())
def test_sir_conservation_and_monotonicity(cfg):
    tr = sir_simulate(cfg)
    assert np.max(np.abs(tr.total - tr.total[0])) < 1e-10
    assert np.all(np.diff(tr.S) <= 1e-15)
    assert np.all(np.diff(tr.R) >= -1e-15)
    assert np.all(tr.new_infections >= 0)


@settings(max_examples=40, deadline=None)
@given(cfg=sir_configs(), e0=unit, sigma=unit)
def test_seir_conservation(cfg, e0, sigma):
    total = cfg.s0 + cfg.i0 + e0
    beta = cfg.beta * (cfg.s0 + cfg.i0) / max(total, 1.0) if total > 0 else cfg.beta
    seir = SeirConfig(cfg.s0, cfg.i0, beta, cfg.gamma, 500, e0=e0, sigma=sigma)
    tr = seir_simulate(seir)
    assert np.max(np.abs(tr.total - tr.total[0])) < 1e-10
    assert np.all(np.diff(tr.S) <= 1e-15)
    assert np.all(np.diff(tr.R) >= -1e-15)
