"""Eigenstates of the full two-excitation Hamiltonian and their observables."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as ssl

from .hilbert import ATOM_PAIRS, SparseHamiltonian, TwoExcitationBasis
from .model import ModelParams, doublon_band_edges, resonant_wavevector, scattering_band_edges

DENSE_LIMIT = 6000

SCATTERING = "scattering"
SINGLE_PHOTON_BOUND = "single_photon_bound"
DOUBLON_LIKE = "doublon_like"


class EigensolveError(RuntimeError):
    pass


class BidcNotFound(LookupError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


def fix_phase(v: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude amplitude real and positive."""
    i = int(np.argmax(np.abs(v)))
    return v * (abs(v[i]) / v[i])


@dataclass
class EigenState:
    energy: float
    vector: np.ndarray
    basis: TwoExcitationBasis
    residual: float = 0.0
    index: int = -1

    @cached_property
    def alpha(self) -> dict[tuple[int, int], complex]:
        """Atom-pair amplitudes keyed by 1-based atom labels."""
        block = self.basis.atom_pair_block(self.vector)
        return {(a + 1, b + 1): complex(block[i]) for i, (a, b) in enumerate(ATOM_PAIRS)}

    @cached_property
    def atomic_excitation(self) -> float:
        return atomic_excitation(self.vector, self.basis)

    @cached_property
    def photon_profile(self) -> tuple[np.ndarray, np.ndarray]:
        return photon_distribution(self.vector, self.basis)

    @property
    def paper_coefficients(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(c, alpha, d)`` in the unnormalized-pair convention (``c_ii = b_ii / sqrt 2``)."""
        b = self.basis
        m = b.photon_matrix(self.vector)
        c = np.triu(m)
        c[np.diag_indices_from(c)] /= math.sqrt(2)
        return c, b.atom_pair_block(self.vector).copy(), b.atom_photon_block(self.vector).copy()


def eigensolve(
    H: SparseHamiltonian,
    window: tuple[float, float] | None = None,
    count: int | None = None,
    center: float | None = None,
    tol: float = 1e-8,
    maxiter: int | None = None,
) -> list[EigenState]:
    """Eigenpairs sorted by energy.

    Without ``window``/``count`` and for small matrices every pair is
    computed densely. Otherwise ``count`` pairs nearest ``center`` (default:
    the window midpoint) come from shift-invert Lanczos, then are filtered to
    the window. Every returned pair satisfies the residual bound
    ``||Hv - Ev|| <= tol * max(1, max|E|)``.
    """
    m = H.matrix
    dim = m.shape[0]
    if window is None and count is None:
        if dim > DENSE_LIMIT:
            raise ValueError(f"dimension {dim} too large for the dense path; give a window")
        w, v = sla.eigh(m.toarray())
    else:
        if center is None:
            if window is None:
                raise ValueError("need a window or a center for the iterative path")
            center = 0.5 * (window[0] + window[1])
        k = count or 40
        # fixed start vector keeps runs reproducible
        v0 = np.ones(dim) / math.sqrt(dim)
        try:
            w, v = ssl.eigsh(m, k=min(k, dim - 2), sigma=center, which="LM", v0=v0, tol=1e-13, maxiter=maxiter)
        except ssl.ArpackNoConvergence as exc:
            raise EigensolveError(
                f"shift-invert Lanczos did not converge: {len(exc.eigenvalues)} of {k} pairs"
            ) from exc
        order = np.argsort(w)
        w, v = w[order], v[:, order]
        if window is not None:
            keep = (w >= window[0]) & (w <= window[1])
            w, v = w[keep], v[:, keep]
    scale = max(1.0, float(np.max(np.abs(w)))) if w.size else 1.0
    out = []
    for q in range(w.size):
        vec = fix_phase(v[:, q].astype(complex))
        res = float(np.linalg.norm(m @ vec - w[q] * vec))
        if res > tol * scale:
            raise EigensolveError(f"pair {q} at E = {w[q]:.10g} has residual {res:.3e}")
        out.append(EigenState(float(w[q]), vec, H.basis, res, q))
    return out


def atomic_excitation(state: np.ndarray, basis: TwoExcitationBasis) -> float:
    pairs = np.abs(basis.atom_pair_block(state)) ** 2
    single = np.abs(basis.atom_photon_block(state)) ** 2
    return float(2 * pairs.sum() + single.sum())


def photon_distribution(state: np.ndarray, basis: TwoExcitationBasis) -> tuple[np.ndarray, np.ndarray]:
    """Per-site one-photon and two-photon contributions to ``<a_j^dag a_j>``."""
    p_one = np.sum(np.abs(basis.atom_photon_block(state)) ** 2, axis=0)
    w = np.abs(basis.photon_matrix(state)) ** 2
    # off-diagonal pairs carry one photon on j, doubly occupied sites two
    p_two = w.sum(axis=1) + np.diag(w)
    return p_one, p_two


def two_photon_correlation(state: np.ndarray, basis: TwoExcitationBasis) -> np.ndarray:
    """``<a_i^dag a_j^dag a_i a_j>``."""
    w = np.abs(basis.photon_matrix(state)) ** 2
    w[np.diag_indices_from(w)] *= 2
    return w


def classify_branches(
    states: list[EigenState],
    params: ModelParams,
    tol: float = 1e-6,
    single_window: tuple[float, float] = (0.8, 1.2),
) -> list[str]:
    lo, hi = doublon_band_edges(params)
    s_lo, s_hi = scattering_band_edges(params)
    labels = []
    for st in states:
        E = st.energy
        if lo - tol <= E <= hi + tol:
            labels.append(DOUBLON_LIKE)
        elif not (s_lo <= E <= s_hi) and single_window[0] <= st.atomic_excitation <= single_window[1]:
            labels.append(SINGLE_PHOTON_BOUND)
        else:
            labels.append(SCATTERING)
    return labels


def localization_window(params: ModelParams, margin: int = 5) -> np.ndarray:
    sites = np.arange(params.site_1 - margin, params.site_2 + margin + 1) % params.n_sites
    return np.unique(sites)


def two_photon_localization(state: EigenState, params: ModelParams, margin: int = 5) -> float:
    """Fraction of the two-photon density inside ``[N_1 - margin, N_2 + margin]``."""
    _, p_two = state.photon_profile
    total = p_two.sum()
    if total <= 0:
        return 0.0
    return float(p_two[localization_window(params, margin)].sum() / total)


def dark_mismatch(state: EigenState, params: ModelParams) -> float:
    """Relative violation of ``g_1^2 alpha_12 + s g_3^2 alpha_34 = 0`` with ``s = cos(K_0 dN)``."""
    g1, g3 = params.couplings[0], params.couplings[2]
    a12, a34 = state.alpha[(1, 2)], state.alpha[(3, 4)]
    try:
        s = math.cos(resonant_wavevector(params.omega, params) * params.delta_n)
    except ValueError:
        return math.inf
    s = 1.0 if s >= 0 else -1.0
    den = max(g1**2 * abs(a12), g3**2 * abs(a34))
    if den < 1e-6:
        return math.inf
    return abs(g1**2 * a12 + s * g3**2 * a34) / den


@dataclass
class BidcDiagnostics:
    atomic_excitation: float
    mismatch: float
    localization: float
    score: float
    passes: dict[str, bool] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.passes.values())


def bidc_diagnostics(
    state: EigenState, params: ModelParams, min_pe: float = 1.5, max_mismatch: float = 0.05,
    min_localization: float = 0.9, margin: int = 5,
) -> BidcDiagnostics:
    pe = state.atomic_excitation
    mm = dark_mismatch(state, params)
    loc = two_photon_localization(state, params, margin)
    passes = {"excitation": pe >= min_pe, "dark_ratio": mm <= max_mismatch, "localization": loc >= min_localization}
    score = (pe / 2) * loc * max(0.0, 1 - min(mm, 1.0))
    return BidcDiagnostics(pe, mm, loc, score, passes)


def find_bidc(
    states: list[EigenState], params: ModelParams, labels: list[str] | None = None, **criteria
) -> tuple[EigenState, BidcDiagnostics]:
    """Pick the bound state in the doublon continuum.

    Candidates are doublon-band states passing the excitation, dark-ratio
    and two-photon localization tests; the highest score wins and ties go to
    the state nearest ``2 omega``.
    """
    if max(params.couplings) == 0:
        raise BidcNotFound("atoms are decoupled from the waveguide")
    labels = labels or classify_branches(states, params)
    best, best_key, best_any = None, None, None
    for st, lab in zip(states, labels):
        if lab != DOUBLON_LIKE:
            continue
        diag = bidc_diagnostics(st, params, **criteria)
        if best_any is None or diag.score > best_any[1].score:
            best_any = (st, diag)
        if not diag.ok:
            continue
        key = (round(diag.score, 9), -abs(st.energy - 2 * params.omega))
        if best_key is None or key > best_key:
            best, best_key = (st, diag), key
    if best is None:
        raise BidcNotFound("no doublon-band state passes the BIDC tests", best_any)
    return best


def in_phase_partner(states: list[EigenState], params: ModelParams) -> EigenState:
    """Doublon-band state with the largest same-sign type-II pair weight."""
    lo, hi = doublon_band_edges(params)
    cands = []
    for st in states:
        if not lo <= st.energy <= hi:
            continue
        a12, a34 = st.alpha[(1, 2)], st.alpha[(3, 4)]
        sym = abs(a12 + a34) ** 2 / 2
        cands.append((sym, st))
    if not cands:
        raise LookupError("no doublon-band states")
    return max(cands, key=lambda c: c[0])[1]


def plateau_spread(states: list[EigenState], min_pe: float = 1.9) -> float:
    """Energy spread of the quasi-degenerate high-excitation states."""
    E = [st.energy for st in states if st.atomic_excitation >= min_pe]
    return float(max(E) - min(E)) if E else 0.0
