"""Entangled-state preparation and pair-to-pair state transfer."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .effective import (
    EffectiveModel,
    effective_bidc,
    integrate_effective,
    solve_bidc_condition,
)
from .hilbert import assemble_hamiltonian, evolve_state
from .model import ModelParams, resonant_wavevector
from .open_system import (
    LindbladParams,
    dark_bright_states,
    decay_rates,
    fidelity,
    ground_state_rho,
    lindblad_propagate,
    pure_rho,
)
from .spectral import BidcNotFound, eigensolve, find_bidc

log = logging.getLogger(__name__)

BACKENDS = ("full", "effective", "lindblad")


class UnsupportedTargetError(ValueError):
    pass


class TransferNotFound(LookupError):
    def __init__(self, message, extrema=None):
        super().__init__(message)
        self.extrema = extrema


@dataclass(frozen=True)
class ProtocolSchedule:
    """Piecewise-linear couplings ``g_12(t)`` and ``g_34(t)`` on ``[0, duration]``."""

    knots_12: tuple[tuple[float, float], ...]
    knots_34: tuple[tuple[float, float], ...]
    duration: float
    samples: int = 200

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        for knots in (self.knots_12, self.knots_34):
            t = np.array([k[0] for k in knots], dtype=float)
            g = np.array([k[1] for k in knots], dtype=float)
            if t.size == 0 or np.any(np.diff(t) <= 0):
                raise ValueError("knot times must be strictly increasing")
            if np.any(g < 0):
                raise ValueError("couplings must be non-negative")
        if self.samples < 1:
            raise ValueError("need at least one sample interval")

    @classmethod
    def linear_ramp(cls, duration: float, start=(0.05, 0.2), end=(0.2, 0.05), samples: int = 200):
        """``g_12`` ramps from ``start[0]`` to ``end[0]``, ``g_34`` from ``start[1]`` to ``end[1]``."""
        return cls(((0.0, start[0]), (duration, end[0])), ((0.0, start[1]), (duration, end[1])), duration, samples)

    @classmethod
    def constant(cls, g12: float, g34: float, duration: float, samples: int = 200):
        return cls(((0.0, g12),), ((0.0, g34),), duration, samples)

    def __call__(self, t: float) -> tuple[float, float]:
        return (_interp(t, self.knots_12), _interp(t, self.knots_34))

    @property
    def sample_times(self) -> np.ndarray:
        return np.linspace(0.0, self.duration, self.samples + 1)

    @property
    def is_constant(self) -> bool:
        g = [k[1] for k in self.knots_12], [k[1] for k in self.knots_34]
        return all(min(x) == max(x) for x in g)


def _interp(t, knots):
    ts = [k[0] for k in knots]
    gs = [k[1] for k in knots]
    return float(np.interp(t, ts, gs))


@dataclass
class PreparationResult:
    times: np.ndarray
    fidelity: np.ndarray
    populations: np.ndarray
    couplings: tuple[float, float]
    delta_n: int
    target: np.ndarray
    lparams: LindbladParams
    long_time_fidelity: float


def couplings_for_target(alpha: float, beta: float, reference: float = 0.1) -> tuple[float, float]:
    """``(g_12, g_34)`` with ``g_34^2 : g_12^2 = |alpha| : |beta|`` and the larger one at ``reference``."""
    a, b = abs(alpha), abs(beta)
    if a == 0 and b == 0:
        raise UnsupportedTargetError("empty target")
    # g12^2 ~ |beta|, g34^2 ~ |alpha|
    scale = max(a, b)
    return reference * math.sqrt(b / scale), reference * math.sqrt(a / scale)


def _target_sign(alpha: complex, beta: complex) -> float:
    if alpha == 0 or beta == 0:
        return 1.0
    rel = complex(beta) / complex(alpha)
    if abs(rel.imag) > 1e-9 * abs(rel):
        raise UnsupportedTargetError(f"relative phase {math.degrees(np.angle(rel)):.3g} deg is neither 0 nor 180")
    # dark state is (g34^2, -s g12^2): beta/alpha < 0 needs s = +1
    return 1.0 if rel.real < 0 else -1.0


def delta_n_for_sign(params: ModelParams, sign: float, max_gap: int | None = None) -> int:
    """Smallest site separation with ``cos(K0 dN) = sign`` (to 1e-9)."""
    k0 = resonant_wavevector(params.omega, params)
    max_gap = max_gap or params.n_sites - 1
    for dn in range(1, max_gap + 1):
        if abs(math.cos(k0 * dn) - sign) < 1e-9:
            return dn
    raise UnsupportedTargetError(f"no separation with cos(K0 dN) = {sign:+g} at K0 = {k0:.6g}")


def prepare_entangled_state(
    params: ModelParams,
    alpha: complex,
    beta: complex,
    eta: float = 3e-5,
    t0: float = 7.3e4,
    t_final: float | None = None,
    samples: int = 400,
    reference: float = 0.1,
    delta_n: int | None = None,
) -> PreparationResult:
    """Drive pair 12 from ``|G>`` and let dissipation leave the dark state ``alpha|eegg> + beta|ggee>``.

    The couplings are fixed by the target; the pair separation is chosen so
    ``cos(K0 dN)`` supplies the sign of ``beta / alpha`` (the configured
    separation is kept when it already has the right sign).
    """
    n = math.hypot(abs(alpha), abs(beta))
    if n == 0:
        raise UnsupportedTargetError("empty target")
    alpha, beta = complex(alpha) / n, complex(beta) / n
    sign = _target_sign(alpha, beta)
    g12, g34 = couplings_for_target(alpha.real if alpha.imag == 0 else abs(alpha), abs(beta), reference)
    if delta_n is None:
        k0 = resonant_wavevector(params.omega, params)
        if abs(math.cos(k0 * params.delta_n) - sign) < 1e-9:
            delta_n = params.delta_n
        else:
            delta_n = delta_n_for_sign(params, sign)
    p = params if delta_n == params.delta_n else _with_gap(params, delta_n)
    lp = decay_rates(p, g12, g34, eta=eta, t0=t0)
    if abs(abs(lp.cos_phase) - 1) > 1e-9:
        raise UnsupportedTargetError(f"cos(K0 dN) = {lp.cos_phase:.6g} is not +-1 at dN = {delta_n}")
    dark, _ = dark_bright_states(g12, g34, lp.sign)
    target = np.array([0, alpha, beta, 0], dtype=complex)
    # align the global phase of the target with the dark state
    ph = np.vdot(dark, target)
    if abs(abs(ph) - 1) > 1e-6:
        raise UnsupportedTargetError("target is not the dark state of any coupling pair")
    target = target * (abs(ph) / ph)
    if t_final is None:
        t_final = t0 + 40.0 / lp.gamma_prime
    times = np.linspace(0.0, t_final, samples + 1)
    times = np.unique(np.append(times, t0))
    traj = lindblad_propagate(ground_state_rho(), lp, times)
    F = traj.fidelity(target)
    return PreparationResult(times, F, traj.populations, (g12, g34), delta_n, target, lp, float(F[-1]))


def _with_gap(params: ModelParams, delta_n: int) -> ModelParams:
    from dataclasses import replace

    if params.site_1 + delta_n >= params.n_sites:
        raise UnsupportedTargetError(f"separation {delta_n} does not fit on a ring of {params.n_sites}")
    return replace(params, site_2=params.site_1 + delta_n)


@dataclass
class TransferResult:
    backend: str
    times: np.ndarray
    ce2: np.ndarray
    cpe2: np.ndarray
    theta: np.ndarray | None
    amp_12: np.ndarray | None = None  # rotating-frame amplitudes
    amp_34: np.ndarray | None = None
    overlap: np.ndarray | None = None
    c_e: complex = 1.0
    c_g: complex = 0.0
    frame: str = "lab"
    extra: dict = field(default_factory=dict)

    @property
    def c_g_conserved(self) -> float:
        """``|c_g|`` is untouched by the dynamics: the all-ground state is an exact eigenstate."""
        return abs(self.c_g)


def _theta(amp_12, amp_34, times, omega, frame):
    ref = np.angle(amp_12[0])
    phase = np.angle(amp_34) - ref
    if frame == "lab":
        phase = phase - 2 * omega * times
    elif frame != "rotating":
        raise ValueError(f"unknown frame {frame!r}")
    # principal value in (-pi, pi]
    out = np.angle(np.exp(1j * phase))
    out[np.isclose(out, -math.pi)] = math.pi
    return out


def run_state_transfer(
    params: ModelParams,
    schedule: ProtocolSchedule,
    backend: str = "effective",
    c_e: complex = 1.0,
    c_g: complex = 0.0,
    frame: str = "lab",
    dt_max: float | None = None,
    convention: str = "stark",
    keep_states: bool = False,
) -> TransferResult:
    """Start from ``sigma_1^+ sigma_2^+ |G, vac>`` and ramp the couplings.

    Populations are reported for the ``c_e = 1`` run scaled by ``|c_e|^2``
    after normalizing ``(c_e, c_g)``; the all-ground component never moves.
    """
    if backend not in BACKENDS:
        raise ValueError(f"backend must be one of {BACKENDS}, got {backend!r}")
    nrm = math.hypot(abs(c_e), abs(c_g))
    if nrm == 0:
        raise ValueError("c_e and c_g both vanish")
    c_e, c_g = c_e / nrm, c_g / nrm
    w = abs(c_e) ** 2
    times = schedule.sample_times
    g0 = schedule(0.0)
    p = params.with_couplings(*g0, convention=convention)
    extra = {}

    if backend == "lindblad":
        lp = decay_rates(p, *g0)
        rho0 = pure_rho(np.array([0, 1, 0, 0]))
        step = dt_max or schedule.duration / 2000
        traj = lindblad_propagate(rho0, lp, times, schedule=schedule, dt_max=step)
        pops = traj.populations
        return TransferResult("lindblad", times, w * pops[:, 1], w * pops[:, 2], None, c_e=c_e, c_g=c_g, frame=frame)

    if backend == "effective":
        model = EffectiveModel.build(p)
        psi0 = model.pair_state([1.0, 0.0])
        sched = None if schedule.is_constant else schedule
        traj = integrate_effective(
            model, psi0, times, schedule=sched, dt_max=dt_max or schedule.duration / 2000, convention=convention
        )
        a12, a34 = traj.ce12, traj.ce34
        extra["states"] = traj.states
        extra["model"] = model
    else:
        H = assemble_hamiltonian(p)
        b = H.basis
        psi0 = b.basis_state("atoms", 0, 1)
        i12, i34 = b.atom_pair_index(0, 1), b.atom_pair_index(2, 3)
        obs = {"a12": lambda v: v[i12], "a34": lambda v: v[i34]}
        traj = evolve_state(
            H,
            psi0,
            times,
            schedule=None if schedule.is_constant else schedule,
            observables=obs,
            dt_max=dt_max or 1.0,
            track_stark=True,
            convention=convention,
            keep_states=keep_states,
        )
        a12, a34 = traj.observables["a12"], traj.observables["a34"]
        extra["states"] = traj.states
        extra["hamiltonian"] = H
        extra["norm_drift"] = traj.max_norm_drift
    theta = _theta(a12, a34, times, p.omega, frame)
    return TransferResult(
        backend, times, w * np.abs(a12) ** 2, w * np.abs(a34) ** 2, theta, a12, a34, c_e=c_e, c_g=c_g, frame=frame,
        extra=extra,
    )


def instantaneous_bidc_effective(model: EffectiveModel, g12: float, g34: float, method: str = "eigen") -> np.ndarray:
    """Normalized BIDC vector in the effective basis (pairs then doublon modes)."""
    from dataclasses import replace

    p = replace(model.params, couplings=(g12, g12, g34, g34))
    if method == "eigen":
        _, vec, _ = effective_bidc(model, g12, g34)
        return vec
    root = solve_bidc_condition(p, model=model)
    v = np.zeros(model.dim, dtype=complex)
    v[0] = 1.0
    v[1] = root.alpha_ratio
    v[model.n_pairs :] = root.ck_over_alpha1
    return v / np.linalg.norm(v)


def bidc_overlap_trace(result: TransferResult, params: ModelParams, schedule: ProtocolSchedule, method: str = "eigen", convention: str = "stark") -> np.ndarray:
    """``P(t) = |<psi(t)|BIDC(g(t))>|^2``; samples where no BIDC is found are NaN."""
    states = result.extra.get("states")
    if result.backend == "lindblad" or states is None:
        raise ValueError("P(t) needs stored states from the full or effective backend")
    cache: dict[tuple[float, float], np.ndarray | None] = {}
    out = np.full(result.times.size, np.nan)
    for n, t in enumerate(result.times):
        g = schedule(t)
        key = (round(g[0], 12), round(g[1], 12))
        if key not in cache:
            cache[key] = _bidc_vector(result, params, g, method, convention)
        v = cache[key]
        if v is None:
            log.warning("no BIDC at t = %g (g = %.4g, %.4g)", t, *g)
            continue
        out[n] = abs(np.vdot(v, states[n])) ** 2
    result.overlap = out
    return out


def _bidc_vector(result, params, g, method, convention):
    if result.backend == "effective":
        return instantaneous_bidc_effective(result.extra["model"], g[0], g[1], method)
    p = params.with_couplings(*g, convention=convention)
    H = assemble_hamiltonian(p)
    states = eigensolve(H, count=30, center=2 * p.omega + 1e-7)
    try:
        st, _ = find_bidc(states, p)
    except BidcNotFound as exc:
        log.warning("%s", exc)
        return None
    return st.vector


@dataclass
class TransferTiming:
    t_star: float
    theta_residual: float
    transfer: float
    amplitude_residual: float
    crossings: np.ndarray


def _fine_theta(result: TransferResult, omega: float, points_per_turn: int = 32):
    """Resample ``theta`` finely by interpolating the slowly varying rotating-frame phase."""
    t = result.times
    rot = np.unwrap(np.angle(result.amp_34) - np.angle(result.amp_12[0]))
    if result.frame == "lab" and omega != 0:
        period = math.pi / abs(omega)
        n = max(t.size, int(math.ceil((t[-1] - t[0]) / period * points_per_turn)) + 1)
    else:
        n = t.size
    tf = np.linspace(t[0], t[-1], n)
    phase = np.interp(tf, t, rot)
    if result.frame == "lab":
        phase = phase - 2 * omega * tf
    th = np.angle(np.exp(1j * phase))
    return tf, th, np.interp(tf, t, result.cpe2)


def transfer_phase_and_time(result: TransferResult, omega: float | None = None) -> TransferTiming:
    """Zero crossings of ``theta(t)``; ``T*`` is the crossing with the largest ``|c'_e|^2``.

    Jumps across the branch cut at ``+-pi`` are not crossings. When the
    rotating-frame amplitudes are stored, ``theta`` is rebuilt on a grid fine
    enough to resolve the ``2 omega`` rotation of the lab frame, and each
    crossing is located by linear interpolation.
    """
    if result.theta is None:
        raise ValueError(f"theta is not available from the {result.backend} backend")
    if result.amp_12 is not None and omega is not None:
        t, th, c = _fine_theta(result, omega)
    else:
        t, th, c = result.times, result.theta, result.cpe2
    cands = [(t[i], c[i]) for i in np.nonzero(th == 0)[0]]
    a, b = th[:-1], th[1:]
    idx = np.nonzero((a * b < 0) & (np.abs(a - b) < math.pi))[0]
    s = a[idx] / (a[idx] - b[idx])
    tc = t[idx] + s * (t[idx + 1] - t[idx])
    cc = c[idx] + s * (c[idx + 1] - c[idx])
    cands += list(zip(tc, cc))
    if not cands:
        raise TransferNotFound("theta never crosses zero", (float(th.min()), float(th.max())))
    t_star, transfer = max(cands, key=lambda x: x[1])
    ce0 = abs(result.c_e) ** 2
    # residual of theta at T* as sampled (zero up to interpolation)
    k = int(np.argmin(np.abs(t - t_star)))
    return TransferTiming(
        float(t_star), float(abs(th[k])), float(transfer), float(abs(transfer - ce0)), np.sort([x[0] for x in cands])
    )
