"""Two-excitation sector: basis, sparse Hamiltonian and time propagation.

Basis states are normalized Fock/atomic states. For a doubly occupied
site the basis vector is ``(a_i^dag)^2 |vac> / sqrt(2)``, so its amplitude
is ``sqrt(2)`` times the coefficient ``c_{i,i}`` of the unnormalized
expansion ``sum_{i<=j} c_{ij} a_i^dag a_j^dag``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .model import ModelParams, atom_frequencies

ATOM_PAIRS = tuple(combinations(range(4), 2))  # (0,1), (0,2), (0,3), (1,2), (1,3), (2,3)

DUMP_MAGIC = b"BIDC"
DUMP_VERSION = 1


class NormDriftError(RuntimeError):
    pass


@dataclass(frozen=True)
class TwoExcitationBasis:
    """Flat indexing of photon pairs, atom pairs and atom-photon states.

    Atoms are 0-based here (atom ``n`` in 1-based physics notation is
    ``n - 1``). Ordering: photon pairs ``(i, j)``, ``i <= j``
    lexicographic; then the six atom pairs; then ``(atom, site)``.
    """

    n_sites: int

    def __post_init__(self):
        if self.n_sites < 2:
            raise ValueError(f"need at least 2 sites, got {self.n_sites}")

    @property
    def n_photon_pairs(self) -> int:
        return self.n_sites * (self.n_sites + 1) // 2

    @property
    def atom_pair_offset(self) -> int:
        return self.n_photon_pairs

    @property
    def atom_photon_offset(self) -> int:
        return self.n_photon_pairs + 6

    @property
    def dim(self) -> int:
        return self.n_photon_pairs + 6 + 4 * self.n_sites

    def photon_index(self, i: int, j: int) -> int:
        if i > j:
            i, j = j, i
        n = self.n_sites
        return i * n - i * (i - 1) // 2 + (j - i)

    def atom_pair_index(self, a: int, b: int) -> int:
        if a > b:
            a, b = b, a
        return self.atom_pair_offset + ATOM_PAIRS.index((a, b))

    def atom_photon_index(self, atom: int, site: int) -> int:
        return self.atom_photon_offset + atom * self.n_sites + site

    @cached_property
    def photon_pairs(self) -> np.ndarray:
        i, j = np.triu_indices(self.n_sites)
        return np.stack([i, j], axis=1)

    def labels(self, q: int) -> tuple[str, int, int]:
        if not 0 <= q < self.dim:
            raise IndexError(q)
        if q < self.atom_pair_offset:
            i, j = self.photon_pairs[q]
            return ("photons", int(i), int(j))
        if q < self.atom_photon_offset:
            a, b = ATOM_PAIRS[q - self.atom_pair_offset]
            return ("atoms", a, b)
        atom, site = divmod(q - self.atom_photon_offset, self.n_sites)
        return ("atom_photon", atom, site)

    def index(self, block: str, x: int, y: int) -> int:
        if block == "photons":
            return self.photon_index(x, y)
        if block == "atoms":
            return self.atom_pair_index(x, y)
        if block == "atom_photon":
            return self.atom_photon_index(x, y)
        raise ValueError(f"unknown block {block!r}")

    def photon_block(self, psi: np.ndarray) -> np.ndarray:
        return psi[: self.atom_pair_offset]

    def atom_pair_block(self, psi: np.ndarray) -> np.ndarray:
        return psi[self.atom_pair_offset : self.atom_photon_offset]

    def atom_photon_block(self, psi: np.ndarray) -> np.ndarray:
        """Amplitudes ``d[atom, site]`` as a ``(4, N)`` array."""
        return psi[self.atom_photon_offset :].reshape(4, self.n_sites)

    def photon_matrix(self, psi: np.ndarray) -> np.ndarray:
        """Symmetric ``N x N`` matrix of normalized photon-pair amplitudes."""
        n = self.n_sites
        m = np.zeros((n, n), dtype=np.result_type(psi, float))
        i, j = self.photon_pairs.T
        b = self.photon_block(psi)
        m[i, j] = b
        m[j, i] = b
        return m

    def basis_state(self, block: str, x: int, y: int) -> np.ndarray:
        v = np.zeros(self.dim, dtype=complex)
        v[self.index(block, x, y)] = 1.0
        return v


@dataclass(frozen=True)
class SparseHamiltonian:
    """``H = static + sum_p g_p(t) coupling[p]`` on a fixed basis.

    ``coupling[0]`` carries the unit-strength atom-photon terms of atoms 1
    and 2, ``coupling[1]`` those of atoms 3 and 4. ``atom_number[p]`` is the
    diagonal excitation count of pair ``p`` so atom frequencies can be moved
    without reassembly.
    """

    basis: TwoExcitationBasis
    params: ModelParams
    static: sp.csr_matrix
    coupling: tuple[sp.csr_matrix, sp.csr_matrix]
    atom_number: tuple[np.ndarray, np.ndarray]
    matrix: sp.csr_matrix = field(repr=False)

    @property
    def dim(self) -> int:
        return self.basis.dim

    def at(self, g_12: float, g_34: float, freqs: Sequence[float] | None = None) -> sp.csr_matrix:
        """Matrix for other couplings (and optionally other atom frequencies)."""
        h = self.static + g_12 * self.coupling[0] + g_34 * self.coupling[1]
        if freqs is not None:
            old = self.params.atom_freqs
            shift = (freqs[0] - old[0]) * self.atom_number[0] + (freqs[2] - old[2]) * self.atom_number[1]
            h = h + sp.diags(shift)
        return h.tocsr()

    def hermiticity_error(self) -> float:
        d = self.matrix - self.matrix.conj().T
        return float(abs(d).max()) if d.nnz else 0.0


def _photon_hops(basis: TwoExcitationBasis, J: float):
    """Rows/cols/values of the hopping term within the photon-pair block."""
    n = basis.n_sites
    rows, cols, vals = [], [], []
    for q, (i, j) in enumerate(basis.photon_pairs):
        i, j = int(i), int(j)
        for s, rest in ((i, j), (j, i)) if i != j else ((i, i),):
            n_s = 2 if i == j else 1
            # one bond term per neighbour; on a 2-site ring both bonds join the same sites
            for t in ((s + 1) % n, (s - 1) % n):
                n_t = 1 if t == rest else 0
                rows.append(basis.photon_index(rest, t))
                cols.append(q)
                vals.append(-J * math.sqrt(n_s) * math.sqrt(n_t + 1))
    return rows, cols, vals


def assemble_hamiltonian(
    params: ModelParams,
    basis: TwoExcitationBasis | None = None,
    g_overrides: tuple[float, float] | None = None,
) -> SparseHamiltonian:
    """Sparse Hamiltonian of the ring plus four atoms in the two-excitation sector."""
    if basis is None:
        basis = TwoExcitationBasis(params.n_sites)
    if basis.n_sites != params.n_sites:
        raise ValueError(f"basis has {basis.n_sites} sites, params {params.n_sites}")
    n, dim = basis.n_sites, basis.dim
    J, U, wc = params.hopping, params.interaction, params.cavity_freq
    freqs = params.atom_freqs
    sites = params.atom_sites

    rows, cols, vals = _photon_hops(basis, J)
    diag = np.zeros(dim)
    pairs = basis.photon_pairs
    diag[: basis.atom_pair_offset] = 2 * wc - U * (pairs[:, 0] == pairs[:, 1])
    number = (np.zeros(dim), np.zeros(dim))
    for (a, b) in ATOM_PAIRS:
        q = basis.atom_pair_index(a, b)
        diag[q] = freqs[a] + freqs[b]
        for atom in (a, b):
            number[atom // 2][q] += 1
    for atom in range(4):
        for s in range(n):
            q = basis.atom_photon_index(atom, s)
            diag[q] = freqs[atom] + wc
            number[atom // 2][q] += 1
            for t in ((s + 1) % n, (s - 1) % n):
                rows.append(basis.atom_photon_index(atom, t))
                cols.append(q)
                vals.append(-J)
    static = sp.coo_matrix((vals, (rows, cols)), shape=(dim, dim)).tocsr() + sp.diags(diag)

    couplings = []
    for pair in (0, 1):
        cr, cc, cv = [], [], []
        for atom in (2 * pair, 2 * pair + 1):
            s_at = sites[atom]
            # atom emits: sigma^- a_{s}^dag on (atom, i) -> photons {i, s}
            for i in range(n):
                q = basis.atom_photon_index(atom, i)
                p = basis.photon_index(i, s_at)
                amp = math.sqrt(2.0) if i == s_at else 1.0
                cr += [p, q]
                cc += [q, p]
                cv += [amp, amp]
            # atom emits out of an atom pair: (atom, other) -> (other, s)
            for other in range(4):
                if other == atom:
                    continue
                q = basis.atom_pair_index(atom, other)
                p = basis.atom_photon_index(other, s_at)
                cr += [p, q]
                cc += [q, p]
                cv += [1.0, 1.0]
        couplings.append(sp.coo_matrix((cv, (cr, cc)), shape=(dim, dim)).tocsr())

    g12, g34 = g_overrides if g_overrides is not None else (params.couplings[0], params.couplings[2])
    matrix = (static + g12 * couplings[0] + g34 * couplings[1]).tocsr()
    if g_overrides is not None:
        params = params.with_couplings(g12, g34)
    return SparseHamiltonian(basis, params, static, tuple(couplings), number, matrix)


def apply_hamiltonian(H, state: np.ndarray) -> np.ndarray:
    m = H.matrix if isinstance(H, SparseHamiltonian) else H
    state = np.asarray(state)
    if state.shape[0] != m.shape[0]:
        raise ValueError(f"state has dimension {state.shape[0]}, Hamiltonian {m.shape[0]}")
    return m @ state


def krylov_expm(matvec: Callable, psi: np.ndarray, dt: float, m: int = 30, tol: float = 1e-12):
    """``exp(-i dt H) psi`` by a Lanczos projection; returns ``(phi, err_est)``.

    The result is an exact unitary image inside the Krylov space, so the
    norm is preserved up to rounding regardless of ``m``.
    """
    beta = np.linalg.norm(psi)
    if beta == 0:
        return psi.copy(), 0.0
    dim = psi.shape[0]
    m = min(m, dim)
    V = np.empty((m + 1, dim), dtype=complex)
    alpha = np.zeros(m)
    beta_k = np.zeros(m)
    V[0] = psi / beta
    k_used = m
    for k in range(m):
        w = matvec(V[k])
        alpha[k] = np.vdot(V[k], w).real
        w = w - alpha[k] * V[k]
        if k > 0:
            w = w - beta_k[k - 1] * V[k - 1]
        # full reorthogonalization keeps the small basis clean
        w = w - V[: k + 1].T @ (V[: k + 1].conj() @ w)
        b = np.linalg.norm(w)
        beta_k[k] = b
        if b < 1e-14 * max(1.0, abs(alpha[k])):
            k_used = k + 1
            break
        V[k + 1] = w / b
    T = np.diag(alpha[:k_used]) + np.diag(beta_k[: k_used - 1], 1) + np.diag(beta_k[: k_used - 1], -1)
    evals, evecs = sla.eigh(T)
    coeff = evecs @ (np.exp(-1j * dt * evals) * evecs[0].conj())
    # error estimate: weight leaking past the last Lanczos vector
    err = abs(beta_k[k_used - 1] * coeff[k_used - 1]) * beta if k_used == m else 0.0
    return beta * (coeff @ V[:k_used]), err


@dataclass
class Trajectory:
    times: np.ndarray
    observables: dict[str, np.ndarray]
    states: np.ndarray | None = None
    max_norm_drift: float = 0.0


GAUSS_OFFSETS = (0.5 - math.sqrt(3) / 6, 0.5 + math.sqrt(3) / 6)
CF4_WEIGHTS = ((3 - 2 * math.sqrt(3)) / 12, (3 + 2 * math.sqrt(3)) / 12)


def cf4_step(apply_exp: Callable, h_at: Callable, psi, t: float, dt: float):
    """Fourth-order commutator-free Magnus step.

    ``h_at(t)`` returns an operator description and ``apply_exp(op_pair,
    weights, dt, psi)`` applies ``exp(-i dt (w1 H1 + w2 H2))``. Each factor is
    a Hermitian exponential, so the step is unitary.
    """
    h1 = h_at(t + GAUSS_OFFSETS[0] * dt)
    h2 = h_at(t + GAUSS_OFFSETS[1] * dt)
    a1, a2 = CF4_WEIGHTS
    psi = apply_exp((h1, h2), (a2, a1), dt, psi)
    return apply_exp((h1, h2), (a1, a2), dt, psi)


def evolve_state(
    H: SparseHamiltonian,
    state_0: np.ndarray,
    sample_times: Iterable[float],
    schedule: Callable[[float], tuple[float, float]] | None = None,
    observables: dict[str, Callable[[np.ndarray], complex]] | None = None,
    dt_max: float = 1.0,
    krylov_dim: int = 30,
    tol: float = 1e-10,
    track_stark: bool = False,
    convention: str = "stark",
    keep_states: bool = False,
    frame_energy: float | None = None,
    norm_tol: float = 1e-8,
) -> Trajectory:
    """Integrate ``i d/dt psi = H(t) psi`` and record observables at ``sample_times``.

    ``schedule(t) -> (g_12, g_34)`` makes the couplings time dependent. With
    ``track_stark`` the atom frequencies follow the couplings through
    ``convention`` so dressed pairs stay at ``2 omega``. The state is carried
    in a frame rotating at ``frame_energy`` (default ``2 omega``); recorded
    amplitudes are in that frame.
    """
    params = H.params
    E0 = 2 * params.omega if frame_energy is None else frame_energy
    shift = sp.identity(H.dim, format="csr") * E0
    times = np.asarray(list(sample_times), dtype=float)
    if np.any(np.diff(times) < 0) or times[0] < 0:
        raise ValueError("sample times must be non-negative and increasing")
    psi = np.asarray(state_0, dtype=complex).copy()
    norm0 = np.linalg.norm(psi)
    if abs(norm0 - 1) > 1e-10:
        raise ValueError(f"initial state not normalized (norm {norm0})")
    observables = observables or {}

    cache: dict[float, sp.csr_matrix] = {}

    def h_at(t):
        if schedule is None:
            return H.matrix - shift
        g12, g34 = schedule(t)
        freqs = None
        if track_stark:
            freqs = atom_frequencies(params.omega, (g12, g12, g34, g34), params, convention)
        return H.at(g12, g34, freqs) - shift

    constant = schedule is None
    m_const = h_at(0.0) if constant else None

    def apply_exp(ops, weights, dt, v):
        if constant:
            A = m_const
        else:
            A = weights[0] * ops[0] + weights[1] * ops[1]
        # split if the Krylov error estimate is too large
        out, err = krylov_expm(lambda x: A @ x, v, dt, m=krylov_dim)
        if err > tol and dt > 1e-6:
            half = apply_exp(ops, weights, dt / 2, v)
            return apply_exp(ops, weights, dt / 2, half)
        return out

    obs = {name: np.empty(len(times), dtype=complex) for name in observables}
    states = np.empty((len(times), H.dim), dtype=complex) if keep_states else None
    drift = 0.0
    t = 0.0
    for n, t_next in enumerate(times):
        while t < t_next - 1e-12:
            dt = min(dt_max, t_next - t)
            if constant:
                psi = apply_exp(None, (0.5, 0.5), dt, psi)
            else:
                psi = cf4_step(apply_exp, h_at, psi, t, dt)
            t += dt
        t = t_next
        nd = abs(np.linalg.norm(psi) - 1.0)
        drift = max(drift, nd)
        if nd > norm_tol:
            raise NormDriftError(f"norm drift {nd:.3e} at t = {t:.6g} exceeds {norm_tol:.1e}")
        for name, fn in observables.items():
            obs[name][n] = fn(psi)
        if keep_states:
            states[n] = psi
    return Trajectory(times, obs, states, drift)


def write_state_dump(path, state: np.ndarray) -> None:
    """Raw amplitude dump: 16-byte header (magic, version, pad, dim) + complex128 data."""
    state = np.ascontiguousarray(state, dtype=np.complex128)
    header = DUMP_MAGIC + struct.pack("<IQ", DUMP_VERSION, state.shape[0])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(state.tobytes())


def read_state_dump(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if header[:4] != DUMP_MAGIC:
            raise ValueError(f"{path}: bad magic {header[:4]!r}")
        version, dim = struct.unpack("<IQ", header[4:])
        if version != DUMP_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        data = np.frombuffer(fh.read(), dtype=np.complex128)
    if data.shape[0] != dim:
        raise ValueError(f"{path}: header says {dim} amplitudes, found {data.shape[0]}")
    return data.copy()
