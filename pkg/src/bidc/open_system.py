"""Markovian reduction to the four atomic states reachable from ``|G>``.

Tracing out the doublon continuum leaves two collective lowering operators:
``A1`` (pair 12) and ``A2`` (pair 34), acting on the ordered basis
``|G>, |eegg>, |ggee>, |eeee>``. The dissipators use
``L[O1, O2] rho = 2 O2 rho O1 - rho O1 O2 - O1 O2 rho``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable

import numpy as np
import scipy.linalg as sla

from .model import ModelParams, group_velocity, resonant_wavevector

STATE_LABELS = ("G", "eegg", "ggee", "eeee")

A1 = np.zeros((4, 4), dtype=complex)
A1[0, 1] = A1[2, 3] = 1.0
A2 = np.zeros((4, 4), dtype=complex)
A2[0, 2] = A2[1, 3] = 1.0


class DivergentRateError(ValueError):
    """Resonance at a doublon band edge, where the group velocity vanishes."""


class PositivityError(RuntimeError):
    pass


@dataclass(frozen=True)
class LindbladParams:
    """Decay rates of the two pairs and the drive on pair 12.

    ``base`` is ``f_{K0}(0)^2 / (J^2 v_g)``; multiplying by ``g^4`` gives an
    individual rate, so rates for other couplings follow without recomputing
    the momentum sum.
    """

    gamma_1: float
    gamma_2: float
    gamma_c: float
    k0: float
    cos_phase: float
    base: float
    g12: float
    g34: float
    eta: float = 0.0
    t0: float = math.inf

    @property
    def gamma_prime(self) -> float:
        return self.gamma_1 + self.gamma_2

    @property
    def raw_integrals(self) -> tuple[float, float, float, float]:
        """``(A, B, C, D)`` coefficients of the four-term generator."""
        return self.gamma_1, self.gamma_c, self.gamma_c, self.gamma_2

    @property
    def sign(self) -> float:
        return 1.0 if self.cos_phase >= 0 else -1.0

    def with_couplings(self, g12: float, g34: float) -> "LindbladParams":
        return replace(
            self,
            gamma_1=g12**4 * self.base,
            gamma_2=g34**4 * self.base,
            gamma_c=g12**2 * g34**2 * self.base * self.cos_phase,
            g12=g12,
            g34=g34,
        )

    def with_drive(self, eta: float, t0: float) -> "LindbladParams":
        return replace(self, eta=eta, t0=t0)


def decay_rates(
    params: ModelParams, g12: float | None = None, g34: float | None = None, eta: float = 0.0, t0: float = math.inf
) -> LindbladParams:
    """Golden-rule rates ``g^4 f_{K0}(0)^2 / (J^2 v_g(K0))`` at the resonant doublon momentum."""
    from .effective import pair_doublon_coupling

    g12 = params.couplings[0] if g12 is None else g12
    g34 = params.couplings[2] if g34 is None else g34
    k0 = resonant_wavevector(params.omega, params)
    vg = float(group_velocity(k0, params))
    if abs(vg) < 1e-12:
        raise DivergentRateError(f"v_g(K0 = {k0:.6g}) = {vg:.3g}: resonance at the band edge")
    f = pair_doublon_coupling(k0, 0, params)
    base = f**2 / (params.hopping**2 * abs(vg))
    cos_phase = math.cos(k0 * params.delta_n)
    return LindbladParams(0.0, 0.0, 0.0, k0, cos_phase, base, 0.0, 0.0, eta, t0).with_couplings(g12, g34)


def dark_bright_states(g12: float, g34: float, sign: float) -> tuple[np.ndarray, np.ndarray]:
    """Dark and bright superpositions of ``|eegg>`` and ``|ggee>`` as 4-vectors."""
    if sign not in (1, -1):
        raise ValueError(f"sign must be +1 or -1, got {sign}")
    if g12 == 0 and g34 == 0:
        raise ValueError("both couplings vanish")
    n = math.hypot(g12**2, g34**2)
    dark = np.array([0, g34**2, -sign * g12**2, 0], dtype=complex) / n
    bright = np.array([0, g12**2, sign * g34**2, 0], dtype=complex) / n
    return dark, bright


def collective_jump(g12: float, g34: float, sign: float) -> np.ndarray:
    n = math.hypot(g12**2, g34**2)
    return (g12**2 * A1 + sign * g34**2 * A2) / n


# row-major vectorization: vec(A rho B) = kron(A, B.T) vec(rho)
_I4 = np.eye(4)


def _dissipator(o1: np.ndarray, o2: np.ndarray) -> np.ndarray:
    prod = o1 @ o2
    return 2 * np.kron(o2, o1.T) - np.kron(_I4, prod.T) - np.kron(prod, _I4)


def _commutator(h: np.ndarray) -> np.ndarray:
    return -1j * (np.kron(h, _I4) - np.kron(_I4, h.T))


def drive_hamiltonian(eta: float) -> np.ndarray:
    return eta * (A1 + A1.conj().T)


def liouvillian(lp: LindbladParams, driven: bool = False, form: str = "general") -> np.ndarray:
    """16 x 16 generator; ``form`` is ``"general"`` (four terms) or ``"collective"`` (single jump)."""
    if form == "general":
        a, b, c, d = lp.raw_integrals
        L = (
            a * _dissipator(A1.conj().T, A1)
            + b * _dissipator(A1.conj().T, A2)
            + c * _dissipator(A2.conj().T, A1)
            + d * _dissipator(A2.conj().T, A2)
        )
    elif form == "collective":
        if abs(abs(lp.cos_phase) - 1) > 1e-9:
            raise ValueError("single-jump form needs |cos(K0 dN)| = 1")
        k = collective_jump(lp.g12, lp.g34, lp.sign)
        L = lp.gamma_prime * _dissipator(k.conj().T, k)
    else:
        raise ValueError(f"unknown generator form {form!r}")
    if driven and lp.eta:
        L = L + _commutator(drive_hamiltonian(lp.eta))
    return L


@dataclass
class LindbladTrajectory:
    times: np.ndarray
    rho: np.ndarray  # (n_times, 4, 4)

    @property
    def populations(self) -> np.ndarray:
        return np.real(np.einsum("tii->ti", self.rho))

    def fidelity(self, target: np.ndarray) -> np.ndarray:
        return np.array([fidelity(r, target) for r in self.rho])


def _check_state(rho: np.ndarray, t: float, tol: float) -> None:
    tr = np.trace(rho).real
    if abs(tr - 1) > tol:
        raise PositivityError(f"trace {tr:.12f} at t = {t:g}")
    if np.linalg.eigvalsh(0.5 * (rho + rho.conj().T)).min() < -tol:
        raise PositivityError(f"negative eigenvalue at t = {t:g}")


def lindblad_propagate(
    rho_0: np.ndarray,
    lparams: LindbladParams,
    sample_times: Iterable[float],
    schedule: Callable[[float], tuple[float, float]] | None = None,
    dt_max: float | None = None,
    form: str | None = None,
    tol: float = 1e-10,
) -> LindbladTrajectory:
    """Propagate ``rho`` by exact exponentials of the generator.

    The drive switches off exactly at ``lparams.t0``, which is inserted as a
    step boundary. With a coupling ``schedule`` the rates follow ``g(t)`` and
    each step of at most ``dt_max`` uses the midpoint generator.
    """
    times = np.asarray(list(sample_times), dtype=float)
    rho = np.asarray(rho_0, dtype=complex)
    _check_state(rho, 0.0, tol)
    if form is None:
        form = "collective" if abs(abs(lparams.cos_phase) - 1) < 1e-9 else "general"
    v = rho.reshape(16)
    out = np.empty((times.size, 4, 4), dtype=complex)
    cache: dict[tuple, np.ndarray] = {}

    def prop(lp: LindbladParams, driven: bool, dt: float) -> np.ndarray:
        key = (lp.g12, lp.g34, driven, round(dt, 12))
        if key not in cache:
            if len(cache) > 256:
                cache.clear()
            cache[key] = sla.expm(liouvillian(lp, driven, form) * dt)
        return cache[key]

    t = 0.0
    for n, t_next in enumerate(times):
        if t_next < t - 1e-12:
            raise ValueError("sample times must be non-decreasing")
        while t < t_next - 1e-12:
            stop = t_next
            if t < lparams.t0 < stop:
                stop = lparams.t0
            if schedule is not None and dt_max is not None:
                stop = min(stop, t + dt_max)
            dt = stop - t
            lp = lparams
            if schedule is not None:
                lp = lparams.with_couplings(*schedule(t + dt / 2))
            v = prop(lp, t < lparams.t0, dt) @ v
            t = stop
        r = v.reshape(4, 4)
        r = 0.5 * (r + r.conj().T)
        _check_state(r, t_next, tol)
        out[n] = r
    return LindbladTrajectory(times, out)


def fidelity(rho: np.ndarray, target: np.ndarray) -> float:
    target = np.asarray(target, dtype=complex)
    return float(np.real(target.conj() @ rho @ target))


def ground_state_rho() -> np.ndarray:
    rho = np.zeros((4, 4), dtype=complex)
    rho[0, 0] = 1
    return rho


def pure_rho(psi: np.ndarray) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    return np.outer(psi, psi.conj())


def stationary_fidelity(lparams: LindbladParams, target: np.ndarray, settle: float = 40.0) -> float:
    """Fidelity once every non-dark component has relaxed, ``settle / gamma'`` after the drive stops."""
    t_end = lparams.t0 + settle / lparams.gamma_prime
    traj = lindblad_propagate(ground_state_rho(), lparams, [lparams.t0, t_end])
    return fidelity(traj.rho[-1], target)


def optimal_cutoff(lparams: LindbladParams, target: np.ndarray, t_max: float, samples: int = 400) -> tuple[float, float]:
    """Drive cutoff in ``(0, t_max]`` maximizing the long-time fidelity, and that fidelity."""
    from scipy.optimize import minimize_scalar

    grid = np.linspace(t_max / samples, t_max, samples)
    traj = lindblad_propagate(ground_state_rho(), replace(lparams, t0=math.inf), grid)
    settle = lparams.with_drive(0.0, 0.0)
    relax = sla.expm(liouvillian(settle) * (40.0 / lparams.gamma_prime))

    def after(rho):
        return fidelity((relax @ rho.reshape(16)).reshape(4, 4), target)

    vals = np.array([after(r) for r in traj.rho])
    i = int(np.argmax(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    res = minimize_scalar(
        lambda t0: -stationary_fidelity(lparams.with_drive(lparams.eta, t0), target),
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": 1e-6 * t_max},
    )
    return float(res.x), float(-res.fun)
