import math

import numpy as np
import pytest

from bidc.effective import EffectiveModel, dark_amplitudes, effective_bidc, integrate_effective
from bidc.model import ModelParams, resonant_wavevector
from bidc.protocols import (
    ProtocolSchedule,
    TransferNotFound,
    TransferResult,
    UnsupportedTargetError,
    bidc_overlap_trace,
    couplings_for_target,
    delta_n_for_sign,
    prepare_entangled_state,
    run_state_transfer,
    transfer_phase_and_time,
)

PAPER = ModelParams.from_reference(None, 0.1, 0.1)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"knots_12": ((0.0, 0.1), (0.0, 0.2)), "knots_34": ((0.0, 0.1),), "duration": 1.0},
        {"knots_12": ((0.0, -0.1),), "knots_34": ((0.0, 0.1),), "duration": 1.0},
        {"knots_12": ((0.0, 0.1),), "knots_34": ((0.0, 0.1),), "duration": 0.0},
    ],
)
def test_schedule_validation(kwargs):
    with pytest.raises(ValueError):
        ProtocolSchedule(**kwargs)


def test_linear_ramp_values():
    s = ProtocolSchedule.linear_ramp(5e3)
    assert s(0.0) == (0.05, 0.2)
    assert s(2.5e3) == pytest.approx((0.125, 0.125), abs=1e-15)
    assert s(5e3) == pytest.approx((0.2, 0.05), abs=1e-15)
    assert s.sample_times.size == 201 and s.sample_times[-1] == 5e3
    assert not s.is_constant and ProtocolSchedule.constant(0.1, 0.1, 10.0).is_constant


def test_couplings_for_targets():
    g12, g34 = couplings_for_target(2 / math.sqrt(5), -1 / math.sqrt(5))
    assert g34 == pytest.approx(0.1) and g34**2 / g12**2 == pytest.approx(2.0)
    g12, g34 = couplings_for_target(1, -1)
    assert g12 == g34 == pytest.approx(0.1)


def test_sign_selects_pair_separation():
    k0 = resonant_wavevector(PAPER.omega, PAPER)
    for s in (1.0, -1.0):
        assert math.cos(k0 * delta_n_for_sign(PAPER, s)) == pytest.approx(s, abs=1e-9)


def test_complex_target_is_unsupported():
    with pytest.raises(UnsupportedTargetError):
        prepare_entangled_state(PAPER, 1, 1j)


def test_no_drive_no_fidelity():
    res = prepare_entangled_state(PAPER, 1, -1, eta=0.0)
    assert np.all(res.fidelity == 0.0)


def test_positive_target_uses_odd_sign_separation():
    res = prepare_entangled_state(PAPER, 4, 1, t0=5.5e4)
    assert res.lparams.cos_phase == pytest.approx(-1.0, abs=1e-9)
    assert np.vdot(res.target, np.array([0, 4, 1, 0]) / math.sqrt(17)).real == pytest.approx(1.0, abs=1e-12)


def test_frozen_dark_state_is_stationary():
    m = EffectiveModel.build(PAPER)
    psi0 = m.pair_state(dark_amplitudes(0.1, 0.1, 1.0))
    tr = integrate_effective(m, psi0, np.linspace(0, 1e3, 51))
    assert np.max(np.abs(np.abs(tr.ce12) ** 2 - 0.5)) <= 1e-3
    assert np.max(np.abs(np.abs(tr.ce34) ** 2 - 0.5)) <= 1e-3


def test_frozen_dressed_bidc_is_stationary():
    m = EffectiveModel.build(PAPER)
    _, vec, _ = effective_bidc(m)
    tr = integrate_effective(m, vec, np.linspace(0, 1e3, 51))
    assert np.max(np.abs(np.abs(tr.ce12) ** 2 - abs(vec[0]) ** 2)) <= 1e-10


def test_transfer_result_bounds_and_ground_amplitude():
    s = ProtocolSchedule.linear_ramp(5e3, samples=50)
    for backend in ("effective", "lindblad"):
        r = run_state_transfer(PAPER, s, backend, c_e=0.6, c_g=0.8, dt_max=25.0)
        assert r.c_g_conserved == pytest.approx(0.8, abs=1e-15)
        assert np.all(r.ce2 + r.cpe2 <= 0.36 + 1e-12)
        assert np.all((r.ce2 >= 0) & (r.cpe2 >= 0))
    assert r.theta is None
    with pytest.raises(ValueError):
        transfer_phase_and_time(r)


def test_unknown_backend_is_rejected():
    with pytest.raises(ValueError):
        run_state_transfer(PAPER, ProtocolSchedule.constant(0.1, 0.1, 10.0), "tensor")


def test_theta_is_principal_value():
    r = run_state_transfer(PAPER, ProtocolSchedule.linear_ramp(5e3, samples=50), "effective", dt_max=25.0)
    assert np.all((r.theta > -math.pi) & (r.theta <= math.pi))


def test_overlap_is_one_for_exact_bidc():
    m = EffectiveModel.build(PAPER)
    _, vec, _ = effective_bidc(m)
    s = ProtocolSchedule.constant(0.1, 0.1, 1.0, samples=1)
    r = TransferResult("effective", s.sample_times, np.zeros(2), np.zeros(2), np.zeros(2), extra={"states": np.array([vec, vec]), "model": m})
    P = bidc_overlap_trace(r, PAPER, s)
    assert P[0] == pytest.approx(1.0, abs=1e-6)
    assert np.all((P >= 0) & (P <= 1 + 1e-12))


def test_overlap_needs_states():
    r = run_state_transfer(PAPER, ProtocolSchedule.constant(0.1, 0.1, 10.0, samples=2), "lindblad")
    with pytest.raises(ValueError):
        bidc_overlap_trace(r, PAPER, ProtocolSchedule.constant(0.1, 0.1, 10.0))


def test_symmetric_phase_picks_best_transfer():
    t = np.linspace(0, 10, 11)
    c = np.sin(t / 14 * math.pi) ** 2
    r = TransferResult("effective", t, 1 - c, c, np.zeros_like(t))
    timing = transfer_phase_and_time(r)
    assert timing.t_star == 7.0 and timing.transfer == 1.0
    assert timing.crossings.size == t.size


def test_constant_phase_has_no_crossing():
    t = np.linspace(0, 10, 11)
    r = TransferResult("effective", t, np.ones_like(t), np.zeros_like(t), np.full_like(t, 0.5))
    with pytest.raises(TransferNotFound) as info:
        transfer_phase_and_time(r)
    assert info.value.extrema == (0.5, 0.5)


def test_branch_cut_jump_is_not_a_crossing():
    t = np.linspace(0, 4, 5)
    th = np.array([3.0, 3.1, -3.1, -3.0, -2.9])
    r = TransferResult("effective", t, np.ones_like(t), np.zeros_like(t), th)
    with pytest.raises(TransferNotFound):
        transfer_phase_and_time(r)
