"""Single-photon-eliminated pair/doublon model.

After adiabatic elimination of the far-detuned atom-photon states, the two
same-site atom pairs couple only to doublon modes ``D_K``. Amplitudes here
live in the frame rotating at ``2 omega``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
import scipy.linalg as sla
from scipy.optimize import brentq

from .hilbert import CF4_WEIGHTS, GAUSS_OFFSETS, TwoExcitationBasis
from .model import (
    ModelParams,
    atom_frequencies,
    doublon_dispersion,
    inverse_localization_length,
    momentum_grid,
    resonant_wavevector,
)

PAIR_LABELS = ("12", "34")
TYPE_ONE_PAIRS = ((0, 2), (0, 3), (1, 2), (1, 3))


class SingularDetuningError(ValueError):
    """An atom is resonant with a single-photon mode."""


class BranchCutError(ValueError):
    """Atomic frequency inside the single-photon band; ``G(n)`` has no closed form."""


class NoRootError(RuntimeError):
    def __init__(self, message, nearest=None, residual=None):
        super().__init__(message)
        self.nearest = nearest
        self.residual = residual


def pair_doublon_coupling(K, r: int, params: ModelParams):
    """Dimensionless pair-doublon coupling ``f_K(r)`` for atoms ``r`` sites apart.

    Evaluated as the sum over the ring's single-photon momenta ``k`` of
    ``L_{k,K} cos((k - K/2) r) / (w_k - omega)`` times ``2 sqrt(2) J / N``.
    """
    J, n = params.hopping, params.n_sites
    k = momentum_grid(n)
    detuning = params.cavity_freq - 2 * J * np.cos(k) - params.omega
    if np.min(np.abs(detuning)) < 1e-12:
        raise SingularDetuningError(f"omega = {params.omega} hits a single-photon mode")
    scalar = np.ndim(K) == 0
    K = np.atleast_1d(np.asarray(K, dtype=float))
    x = np.asarray(inverse_localization_length(K, params), dtype=float)
    q = k[None, :] - K[:, None] / 2
    finite = np.isfinite(x)
    xs = np.where(finite, x, 1.0)[:, None]
    L = np.where(
        finite[:, None],
        np.sinh(xs) * np.sqrt(np.tanh(xs)) / (np.cosh(xs) - np.cos(q)),
        1.0,
    )
    f = 2 * math.sqrt(2) * J / n * np.sum(L * np.cos(q * r) / detuning[None, :], axis=1)
    return float(f[0]) if scalar else f


def single_photon_greens(n: int, params: ModelParams) -> tuple[float, float]:
    """Photon-mediated exchange ``G(n)`` between sites ``n`` apart, and its decay exponent."""
    J = params.hopping
    d = params.omega - params.cavity_freq
    if d >= -2 * J:
        raise BranchCutError(f"need omega < w_c - 2J for a real decay exponent, got omega = {params.omega}")
    a = math.log(-d / (2 * J) + math.sqrt(d**2 / (4 * J**2) - 1))
    return J * math.exp(-a * abs(n)) / math.sqrt(d**2 - 4 * J**2), a


def stark_shifted_frequencies(params: ModelParams) -> tuple[float, float]:
    J = params.hopping
    single_photon_greens(0, params)  # raises inside the band
    root = math.sqrt((params.omega - params.cavity_freq) ** 2 - 4 * J**2)
    g1, g3 = params.couplings[0], params.couplings[2]
    return params.omega + g1**2 / root, params.omega + g3**2 / root


def pair_detunings(params: ModelParams, g12: float, g34: float, convention: str | None = None):
    """Dressed pair energies minus ``2 omega``: bare frequencies less the two Stark shifts.

    ``convention=None`` takes the bare frequencies from ``params``; otherwise
    they are re-derived for the given couplings.
    """
    J = params.hopping
    root = math.sqrt((params.omega - params.cavity_freq) ** 2 - 4 * J**2)
    g = (g12, g12, g34, g34)
    freqs = params.atom_freqs if convention is None else atom_frequencies(params.omega, g, params, convention)
    out = []
    for a, b in ((0, 1), (2, 3)) + TYPE_ONE_PAIRS:
        out.append(freqs[a] + freqs[b] - 2 * params.omega - (g[a] ** 2 + g[b] ** 2) / root)
    return np.array(out)


@dataclass(frozen=True)
class EffectiveModel:
    """Precomputed ``f_K`` tables and phases for one set of static parameters."""

    params: ModelParams
    K: np.ndarray
    detuning: np.ndarray
    f_same: np.ndarray
    f_apart: np.ndarray
    include_type_one: bool = False

    @classmethod
    def build(cls, params: ModelParams, include_type_one: bool = False) -> "EffectiveModel":
        K = params.k_grid
        return cls(
            params=params,
            K=K,
            detuning=doublon_dispersion(K, params) - 2 * params.omega,
            f_same=pair_doublon_coupling(K, 0, params),
            f_apart=pair_doublon_coupling(K, params.delta_n, params),
            include_type_one=include_type_one,
        )

    @property
    def n_pairs(self) -> int:
        return 6 if self.include_type_one else 2

    @property
    def dim(self) -> int:
        return self.n_pairs + self.K.size

    def coupling_vectors(self) -> np.ndarray:
        """Rows ``<D_K| V |pair>`` for unit ``g^2`` (same-site) or ``g1 g3`` (type I)."""
        p = self.params
        scale = 1.0 / (p.hopping * math.sqrt(p.n_sites))
        rows = [
            -scale * self.f_same * np.exp(-1j * self.K * p.site_1),
            -scale * self.f_same * np.exp(-1j * self.K * p.site_2),
        ]
        if self.include_type_one:
            phase = np.exp(-1j * self.K * (p.site_1 + p.site_2) / 2)
            rows += [-scale * self.f_apart * phase] * 4
        return np.array(rows)

    def hamiltonian(self, g12: float | None = None, g34: float | None = None, convention: str | None = None):
        """Dense effective Hamiltonian in the rotating frame.

        Ordering: pair 12, pair 34, [13, 14, 23, 24], then doublon modes on
        the K grid.
        """
        p = self.params
        g12 = p.couplings[0] if g12 is None else g12
        g34 = p.couplings[2] if g34 is None else g34
        vec = self.coupling_vectors()
        strengths = [g12**2, g34**2] + ([g12 * g34] * 4 if self.include_type_one else [])
        npair = self.n_pairs
        H = np.zeros((self.dim, self.dim), dtype=complex)
        H[npair:, npair:] = np.diag(self.detuning)
        H[:npair, :npair] = np.diag(pair_detunings(p, g12, g34, convention)[:npair])
        for i, s in enumerate(strengths):
            H[npair:, i] = s * vec[i]
            H[i, npair:] = s * vec[i].conj()
        return H

    def pair_state(self, amplitudes) -> np.ndarray:
        v = np.zeros(self.dim, dtype=complex)
        amplitudes = np.asarray(amplitudes, dtype=complex)
        v[: amplitudes.size] = amplitudes
        return v


@dataclass
class EffectiveTrajectory:
    times: np.ndarray
    states: np.ndarray  # (n_times, dim)
    model: EffectiveModel

    @property
    def ce12(self) -> np.ndarray:
        return self.states[:, 0]

    @property
    def ce34(self) -> np.ndarray:
        return self.states[:, 1]

    @property
    def doublon_weight(self) -> np.ndarray:
        return np.sum(np.abs(self.states[:, self.model.n_pairs :]) ** 2, axis=1)

    @property
    def norm(self) -> np.ndarray:
        return np.sum(np.abs(self.states) ** 2, axis=1)


def _expm_hermitian(H: np.ndarray, dt: float) -> np.ndarray:
    w, v = sla.eigh(H)
    return (v * np.exp(-1j * dt * w)) @ v.conj().T


def integrate_effective(
    model: EffectiveModel,
    state_0: np.ndarray,
    sample_times: Iterable[float],
    schedule: Callable[[float], tuple[float, float]] | None = None,
    dt_max: float = 20.0,
    convention: str | None = None,
) -> EffectiveTrajectory:
    """Propagate the pair/doublon amplitudes.

    Each step is a product of exact Hermitian exponentials (fourth-order
    commutator-free scheme for time-dependent couplings), so the norm is
    conserved to rounding. ``convention`` controls whether atom frequencies
    track the couplings (``"stark"`` keeps the pairs at ``2 omega``).
    """
    times = np.asarray(list(sample_times), dtype=float)
    psi = np.asarray(state_0, dtype=complex).copy()
    if psi.shape[0] != model.dim:
        raise ValueError(f"state has dimension {psi.shape[0]}, model {model.dim}")
    if abs(np.linalg.norm(psi) - 1) > 1e-10:
        raise ValueError("initial state not normalized")
    out = np.empty((times.size, model.dim), dtype=complex)
    if schedule is None:
        w, v = sla.eigh(model.hamiltonian(convention=convention))
        c0 = v.conj().T @ psi
        for n, t in enumerate(times):
            out[n] = v @ (np.exp(-1j * w * t) * c0)
        return EffectiveTrajectory(times, out, model)

    def h_at(t):
        g12, g34 = schedule(t)
        return model.hamiltonian(g12, g34, convention="stark" if convention is None else convention)

    a1, a2 = CF4_WEIGHTS
    t = 0.0
    for n, t_next in enumerate(times):
        while t < t_next - 1e-12:
            dt = min(dt_max, t_next - t)
            h1 = h_at(t + GAUSS_OFFSETS[0] * dt)
            h2 = h_at(t + GAUSS_OFFSETS[1] * dt)
            psi = _expm_hermitian(a2 * h1 + a1 * h2, dt) @ psi
            psi = _expm_hermitian(a1 * h1 + a2 * h2, dt) @ psi
            t += dt
        t = t_next
        out[n] = psi
    return EffectiveTrajectory(times, out, model)


def dark_amplitudes(g12: float, g34: float, sign: float) -> np.ndarray:
    """Atomic dark combination ``(g34^2, -sign g12^2) / norm`` of the two pairs."""
    norm = math.hypot(g12**2, g34**2)
    return np.array([g34**2, -sign * g12**2]) / norm


def effective_bidc(model: EffectiveModel, g12: float | None = None, g34: float | None = None, convention="stark"):
    """Eigenpair of the effective Hamiltonian that best matches the dark atomic state.

    Returns ``(energy, vector, dark_overlap)``; energy is relative to ``2 omega``.
    """
    p = model.params
    g12 = p.couplings[0] if g12 is None else g12
    g34 = p.couplings[2] if g34 is None else g34
    K0 = resonant_wavevector(p.omega, p)
    sign = math.cos(K0 * p.delta_n)
    w, v = sla.eigh(model.hamiltonian(g12, g34, convention))
    dark = dark_amplitudes(g12, g34, np.sign(sign) if abs(sign) > 1e-9 else 1.0)
    score = np.abs(dark.conj() @ v[:2]) ** 2
    q = int(np.argmax(score))
    return w[q], v[:, q], float(score[q])


@dataclass
class BidcRoot:
    energy: float
    residual: float
    k0: float
    alpha_ratio: complex
    ck_over_alpha1: np.ndarray
    excluded: np.ndarray
    found: bool


def _condition_terms(params: ModelParams, f: np.ndarray, K: np.ndarray, K0: float):
    J, n = params.hopping, params.n_sites
    g1 = params.couplings[0]
    weight = g1**4 * f**2 / (J**2 * n)
    numer = np.exp(1j * K0 * params.delta_n) * np.exp(-1j * K * params.delta_n) - 1
    return weight, numer


def bidc_condition(E: float, params: ModelParams, model: EffectiveModel | None = None, exclude_tol: float = 1e-9):
    """``F(E) = (E - 2 omega - d) + sum_K w_K (e^{i K0 dN} e^{-i K dN} - 1) / (E - E_K)``.

    ``d`` is the dressed detuning of pair 12 (zero when the Stark shifts are
    compensated). A bound state at ``E`` requires ``F(E) = 0``. Terms whose numerator
    vanishes (resonant momenta with a matched phase) are dropped, as are
    terms whose denominator vanishes on the grid.
    """
    model = model or EffectiveModel.build(params)
    K0 = resonant_wavevector(params.omega, params)
    weight, numer = _condition_terms(params, model.f_same, model.K, K0)
    EK = model.detuning + 2 * params.omega
    denom = E - EK
    keep = (np.abs(numer) > 1e-12) & (np.abs(denom) > exclude_tol)
    shift = pair_detunings(params, params.couplings[0], params.couplings[2])[0]
    val = (E - 2 * params.omega - shift) + np.sum(weight[keep] * numer[keep] / denom[keep])
    return val, ~keep


def solve_bidc_condition(params: ModelParams, window: float | None = None, model: EffectiveModel | None = None) -> BidcRoot:
    """Root of :func:`bidc_condition` closest to ``2 omega``.

    With a real ``exp(i K0 dN)`` the condition is real and is bracketed
    between neighbouring doublon poles; otherwise the minimum of ``|F|`` is
    returned with ``found=False``.
    """
    model = model or EffectiveModel.build(params)
    K0 = resonant_wavevector(params.omega, params)
    E0 = 2 * params.omega + pair_detunings(params, params.couplings[0], params.couplings[2])[0]
    weight, numer = _condition_terms(params, model.f_same, model.K, K0)
    # poles with nonzero residue
    live = np.unique(np.round((model.detuning + E0)[np.abs(numer) > 1e-12], 13))
    below = live[live < E0 - 1e-12]
    above = live[live > E0 + 1e-12]
    lo = below.max() if below.size else E0 - (window or 0.05)
    hi = above.min() if above.size else E0 + (window or 0.05)
    if window is not None:
        lo, hi = max(lo, E0 - window), min(hi, E0 + window)
    real_phase = abs(math.sin(K0 * params.delta_n)) < 1e-9

    def F(E):
        return bidc_condition(E, params, model)[0]

    eps = 1e-12 * max(1.0, abs(E0))
    grid = np.linspace(lo + 1e4 * eps, hi - 1e4 * eps, 2001)
    vals = np.array([F(E) for E in grid])
    if real_phase:
        re = vals.real
        crossings = np.nonzero(np.sign(re[:-1]) * np.sign(re[1:]) < 0)[0]
        # keep sign changes that are roots, not poles
        roots = []
        for i in crossings:
            a, b = grid[i], grid[i + 1]
            r = brentq(lambda E: F(E).real, a, b, xtol=1e-15, rtol=1e-14)
            if abs(F(r)) < 1e-8:
                roots.append(r)
        if roots:
            E = min(roots, key=lambda r: abs(r - E0))
            return _bidc_root(params, model, E, K0, abs(F(E)), True)
    i = int(np.argmin(np.abs(vals)))
    E = grid[i]
    return _bidc_root(params, model, E, K0, float(abs(vals[i])), False)


def _bidc_root(params, model, E, K0, residual, found) -> BidcRoot:
    g1, g3 = params.couplings[0], params.couplings[2]
    J, n = params.hopping, params.n_sites
    ratio = -(g1**2 / g3**2) * np.exp(1j * K0 * params.delta_n) if g3 > 0 else np.inf
    EK = model.detuning + 2 * params.omega
    numer = np.exp(1j * K0 * params.delta_n) * np.exp(-1j * model.K * params.site_2) - np.exp(
        -1j * model.K * params.site_1
    )
    denom = E - EK
    excluded = (np.abs(numer) < 1e-12) | (np.abs(denom) < 1e-9)
    ck = np.zeros_like(numer)
    ck[~excluded] = g1**2 * model.f_same[~excluded] / (J * math.sqrt(n)) * numer[~excluded] / denom[~excluded]
    return BidcRoot(float(E), float(residual), K0, complex(ratio), ck, excluded, found)


def doublon_pair_amplitudes(K: float, params: ModelParams, basis: TwoExcitationBasis | None = None) -> np.ndarray:
    """Coefficients ``C_{m,n}`` (symmetric ``N x N``) of ``D_K^dag |vac>``.

    The center of mass is taken along the short arc between ``m`` and ``n``
    so the ring wrap does not flip signs.
    """
    from .model import doublon_wavefunction

    n = params.n_sites
    m_idx, n_idx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    r = (m_idx - n_idx) % n
    r = np.where(r > n // 2, r - n, r)
    xc = n_idx + r / 2
    return np.exp(1j * K * xc) * doublon_wavefunction(K, r, params) / math.sqrt(2 * n)


def coefficients_to_basis(C: np.ndarray, basis: TwoExcitationBasis) -> np.ndarray:
    """Normalized photon-pair amplitudes from symmetric ``C_{m,n}`` (sum over ordered pairs)."""
    i, j = basis.photon_pairs.T
    return np.where(i == j, math.sqrt(2) * C[i, j], 2 * C[i, j])


@dataclass
class BidcProfile:
    pair_coefficients: np.ndarray  # C_{m,n}, normalized state
    alpha: tuple[complex, complex]
    p_two: np.ndarray
    photon_weight: float


def bidc_real_space_profile(params: ModelParams, root: BidcRoot, model: EffectiveModel | None = None) -> BidcProfile:
    """Real-space two-photon coefficients of the bound state and ``P_two(j) = 4 sum_n |C_{j,n}|^2``."""
    model = model or EffectiveModel.build(params)
    C = np.zeros((params.n_sites, params.n_sites), dtype=complex)
    for K, ck in zip(model.K, root.ck_over_alpha1):
        if ck != 0:
            C += ck * doublon_pair_amplitudes(K, params)
    photon = 2 * np.sum(np.abs(C) ** 2)
    a1 = 1.0
    a2 = root.alpha_ratio
    norm = math.sqrt(abs(a1) ** 2 + abs(a2) ** 2 + photon)
    C /= norm
    p_two = 4 * np.sum(np.abs(C) ** 2, axis=1)
    return BidcProfile(C, (a1 / norm, a2 / norm), p_two, photon / norm**2)
