import math

import numpy as np
import pytest
from scipy.integrate import quad

from bidc.effective import (
    BranchCutError,
    EffectiveModel,
    SingularDetuningError,
    bidc_condition,
    bidc_real_space_profile,
    doublon_pair_amplitudes,
    effective_bidc,
    integrate_effective,
    pair_doublon_coupling,
    single_photon_greens,
    solve_bidc_condition,
    stark_shifted_frequencies,
)
from bidc.model import ModelParams
from bidc.open_system import decay_rates
from bidc.protocols import ProtocolSchedule

PAPER = ModelParams.from_reference(None, 0.1, 0.1)


def greens_integral(n, omega):
    """``(1/2pi) int exp(ikn) / (w_k - omega) dk`` by adaptive quadrature."""
    val, _ = quad(lambda k: 1 / (-2 * math.cos(k) - omega), -math.pi, math.pi, weight="cos", wvar=n, epsabs=1e-15)
    return val / (2 * math.pi)


def test_coupling_function_is_even_in_k():
    K = PAPER.k_grid
    f = pair_doublon_coupling(K, 0, PAPER)
    g = pair_doublon_coupling(-K, 0, PAPER)
    assert np.max(np.abs(f - g)) <= 1e-14


def test_distant_atoms_couple_weakly():
    K = PAPER.k_grid
    ratio = np.max(np.abs(pair_doublon_coupling(K, 8, PAPER))) / np.max(np.abs(pair_doublon_coupling(K, 0, PAPER)))
    assert ratio < 0.2


def test_coupling_function_converges_with_ring_size():
    big = ModelParams.from_reference(None, 0.1, 0.1, n_sites=592)
    K = PAPER.k_grid  # every 148-site momentum is also on the 592-site grid
    a = pair_doublon_coupling(K, 0, PAPER)
    b = pair_doublon_coupling(K, 0, big)
    assert np.max(np.abs(a - b) / np.abs(b)) <= 1e-3


def test_coupling_function_rejects_resonant_atoms():
    p = ModelParams(n_sites=4, site_2=2, omega=0.0, atom_freqs=(0.0,) * 4)
    with pytest.raises(SingularDetuningError):
        pair_doublon_coupling(0.0, 0, p)


@pytest.mark.parametrize("n", range(13))
def test_greens_function_matches_k_integral(n):
    G, _ = single_photon_greens(n, PAPER)
    ref = greens_integral(n, PAPER.omega)
    assert abs(G - ref) <= 1e-6 * abs(ref)


def test_greens_function_values():
    G0, a = single_photon_greens(0, PAPER)
    assert G0 == pytest.approx(1 / math.sqrt(7), rel=1e-12)
    assert a == pytest.approx(math.log(math.sqrt(11) / 2 + math.sqrt(7) / 2), rel=1e-12)
    assert a == pytest.approx(1.09231, abs=2e-5)
    assert single_photon_greens(8, PAPER)[0] / G0 == pytest.approx(1.6e-4, rel=0.05)


@pytest.mark.parametrize("omega", [-2.3, -3.0, -5.5])
def test_greens_origin_matches_integral_for_other_frequencies(omega):
    p = ModelParams(omega=omega)
    assert single_photon_greens(0, p)[0] == pytest.approx(greens_integral(0, omega), rel=1e-6)


def test_greens_function_needs_frequency_below_band():
    with pytest.raises(BranchCutError):
        single_photon_greens(0, ModelParams(omega=-1.5))


def test_stark_shifted_frequencies():
    w1, w3 = stark_shifted_frequencies(ModelParams.from_reference(None, 0.0, 0.1))
    assert w1 == PAPER.omega
    assert w3 - PAPER.omega == pytest.approx(0.0037796, abs=5e-8)


def test_effective_hamiltonian_is_hermitian():
    m = EffectiveModel.build(PAPER, include_type_one=True)
    H = m.hamiltonian(0.05, 0.2, convention="stark")
    assert np.max(np.abs(H - H.conj().T)) == 0.0


def test_decoupled_pair_stays_empty():
    p = ModelParams.from_reference(None, 0.1, 0.0)
    m = EffectiveModel.build(p)
    tr = integrate_effective(m, m.pair_state([1, 0]), np.linspace(0, 2000, 21))
    assert np.max(np.abs(tr.ce34)) <= 1e-13


def test_isolated_pair_decays_at_golden_rule_rate():
    # 592 sites push the revival time (N / v_g ~ 980) beyond one decay time
    p = ModelParams.from_reference(None, 0.15, 0.0, n_sites=592)
    m = EffectiveModel.build(p)
    rate = 2 * decay_rates(p).gamma_1
    ts = np.linspace(0, 1 / rate, 60)
    tr = integrate_effective(m, m.pair_state([1, 0]), ts)
    slope = np.polyfit(ts[5:], np.log(np.abs(tr.ce12[5:]) ** 2), 1)[0]
    assert abs(-slope / rate - 1) <= 0.10


def test_dark_pair_state_is_protected():
    m = EffectiveModel.build(PAPER)
    tr = integrate_effective(m, m.pair_state(np.array([1, -1]) / math.sqrt(2)), [1e4])
    assert (np.abs(tr.ce12[-1]) ** 2 + np.abs(tr.ce34[-1]) ** 2) >= 0.99


def test_ramped_integration_conserves_probability():
    m = EffectiveModel.build(PAPER)
    s = ProtocolSchedule.linear_ramp(2000.0)
    tr = integrate_effective(m, m.pair_state([1, 0]), s.sample_times, schedule=s, dt_max=5.0)
    assert np.max(np.abs(tr.norm - 1)) <= 1e-8


def test_bidc_root_sits_at_twice_reference_frequency():
    root = solve_bidc_condition(PAPER)
    assert root.found
    assert abs(root.energy - 2 * PAPER.omega) <= 1e-4
    assert abs(bidc_condition(root.energy, PAPER)[0]) <= 1e-8
    assert root.alpha_ratio == pytest.approx(-1.0, abs=1e-12)


def test_root_survives_ring_refinement():
    big = ModelParams.from_reference(None, 0.1, 0.1, n_sites=296)
    assert solve_bidc_condition(big).energy == pytest.approx(solve_bidc_condition(PAPER).energy, abs=1e-6)


def test_odd_separation_has_no_root_at_resonance():
    p = ModelParams.from_reference(None, 0.1, 0.1, site_2=7)
    root = solve_bidc_condition(p)
    assert not root.found
    assert root.residual > 1e-6


def test_vanishing_coupling_limit():
    p = ModelParams.from_reference(None, 1e-4, 1e-4)
    root = solve_bidc_condition(p)
    assert abs(root.energy - 2 * p.omega) <= 1e-12
    assert np.max(np.abs(root.ck_over_alpha1)) <= 1e-6


def test_effective_eigenstate_is_the_dark_state():
    m = EffectiveModel.build(PAPER)
    E, vec, overlap = effective_bidc(m)
    assert overlap >= 0.99
    assert abs(E) <= 1e-4


def test_doublon_states_are_normalized_on_rings():
    for n in (40, 64):
        p = ModelParams(n_sites=n)
        for K in p.k_grid[:: n // 8]:
            C = doublon_pair_amplitudes(K, p)
            assert abs(2 * np.sum(np.abs(C) ** 2) - 1) <= 1e-6


@pytest.fixture(scope="module")
def paper_profile():
    return bidc_real_space_profile(PAPER, solve_bidc_condition(PAPER))


def test_profile_is_normalized(paper_profile):
    a1, a2 = paper_profile.alpha
    assert abs(a1) ** 2 + abs(a2) ** 2 + paper_profile.photon_weight == pytest.approx(1.0, abs=1e-12)
    assert paper_profile.p_two.sum() == pytest.approx(2 * paper_profile.photon_weight, rel=1e-12)


def test_profile_is_mirror_symmetric(paper_profile):
    n = PAPER.n_sites
    j = np.arange(n)
    mirror = (PAPER.site_1 + PAPER.site_2 - j) % n
    assert np.max(np.abs(paper_profile.p_two - paper_profile.p_two[mirror])) <= 1e-12


def test_profile_has_doublon_support(paper_profile):
    C = np.abs(paper_profile.pair_coefficients) ** 2
    n = PAPER.n_sites
    m, k = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    d = np.abs(m - k)
    d = np.minimum(d, n - d)
    assert C[d <= 3].sum() / C.sum() >= 0.99


def test_effective_model_tracks_full_model_on_sixty_sites():
    from bidc.hilbert import assemble_hamiltonian, evolve_state

    p = ModelParams.from_reference(None, 0.1, 0.1, n_sites=60)
    H = assemble_hamiltonian(p)
    ts = np.linspace(0, 5e3, 201)
    psi0 = H.basis.basis_state("atoms", 0, 1)
    q = H.basis.atom_pair_index(0, 1)
    tr = evolve_state(H, psi0, ts[1:], observables={"a12": lambda s: s[q]})
    full = np.r_[1.0, np.abs(tr.observables["a12"]) ** 2]
    m = EffectiveModel.build(p)
    eff = np.abs(integrate_effective(m, m.pair_state([1, 0]), ts).ce12) ** 2
    dev = np.max(np.abs(full - eff))
    print(f"effective vs full, 60 sites: max deviation {dev:.4f}")
    assert dev <= 0.02
