"""Model parameters and closed-form band structure of the interacting ring.

Energies are in units of the hopping ``J`` and times in ``1/J``. The ring
is periodic, so center-of-mass momenta live on ``K = 2 pi m / N_c`` mapped
to ``(-pi, pi]``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

CONFIG_KEYS = (
    "n_sites",
    "hopping",
    "interaction",
    "cavity_freq",
    "site_1",
    "site_2",
    "omega",
    "omega_1",
    "omega_2",
    "omega_3",
    "omega_4",
    "g_12",
    "g_34",
)


class OutOfBandError(ValueError):
    """Requested pair frequency does not resonate with the doublon band."""


class NotLocalizedError(ValueError):
    """Doublon quantities requested at ``U = 0`` where no bound band exists."""


class RegimeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters of four atoms on a periodic coupled-resonator ring.

    Atoms 1 and 2 sit on ``site_1``, atoms 3 and 4 on ``site_2``. ``omega``
    is the reference frequency: a pair of excited atoms is resonant with
    the doublon of momentum ``K_0`` where ``E_{K_0} = 2 omega``. The bare
    transition frequencies ``atom_freqs`` may carry a Stark compensation on
    top of ``omega`` (see :meth:`from_reference`).
    """

    n_sites: int = 148
    hopping: float = 1.0
    interaction: float = 6.0
    cavity_freq: float = 0.0
    site_1: int = 0
    site_2: int = 8
    omega: float = field(default=float("nan"))
    atom_freqs: tuple[float, float, float, float] = (float("nan"),) * 4
    couplings: tuple[float, float, float, float] = (0.1, 0.1, 0.1, 0.1)

    def __post_init__(self):
        if int(self.n_sites) != self.n_sites or self.n_sites < 2:
            raise ValueError(f"n_sites must be an integer >= 2, got {self.n_sites}")
        if not self.hopping > 0:
            raise ValueError(f"hopping must be > 0, got {self.hopping}")
        if not self.interaction >= 0:
            raise ValueError(f"interaction must be >= 0, got {self.interaction}")
        if not 0 <= self.site_1 < self.site_2 < self.n_sites:
            raise ValueError(
                f"need 0 <= site_1 < site_2 < n_sites, got "
                f"{self.site_1}, {self.site_2}, {self.n_sites}"
            )
        if len(self.atom_freqs) != 4 or len(self.couplings) != 4:
            raise ValueError("atom_freqs and couplings need four entries each")
        g = self.couplings
        if g[0] != g[1] or g[2] != g[3]:
            raise ValueError("couplings must satisfy g_1 = g_2 and g_3 = g_4")
        if any(x < 0 for x in g):
            raise ValueError("couplings must be non-negative")
        object.__setattr__(self, "atom_freqs", tuple(float(x) for x in self.atom_freqs))
        object.__setattr__(self, "couplings", tuple(float(x) for x in self.couplings))
        if math.isnan(self.omega):
            object.__setattr__(self, "omega", 0.5 * doublon_dispersion(math.pi / 2, self))
        if any(math.isnan(x) for x in self.atom_freqs):
            object.__setattr__(self, "atom_freqs", (self.omega,) * 4)

    @classmethod
    def from_reference(
        cls,
        omega: float | None = None,
        g_12: float = 0.1,
        g_34: float = 0.1,
        convention: str = "stark",
        **kwargs,
    ) -> "ModelParams":
        """Build parameters from the reference frequency.

        ``convention="stark"`` raises each atom's bare frequency by its
        single-photon Stark shift ``g^2 / sqrt(omega^2 - 4J^2)`` so the
        dressed pairs sit exactly at ``2 omega``. ``convention="bare"`` uses
        ``omega`` directly. ``omega=None`` selects ``E_{pi/2} / 2``.
        """
        base = cls(couplings=(g_12, g_12, g_34, g_34), **kwargs)
        if omega is None:
            omega = base.omega
        base = replace(base, omega=float(omega))
        return base.with_couplings(g_12, g_34, convention=convention)

    def with_couplings(self, g_12: float, g_34: float, convention: str | None = None):
        """Copy with new pair couplings; re-derive frequencies if a convention is given."""
        couplings = (g_12, g_12, g_34, g_34)
        if convention is None:
            return replace(self, couplings=couplings)
        freqs = atom_frequencies(self.omega, couplings, self, convention)
        return replace(self, couplings=couplings, atom_freqs=freqs)

    @property
    def delta_n(self) -> int:
        return self.site_2 - self.site_1

    @property
    def atom_sites(self) -> tuple[int, int, int, int]:
        return (self.site_1, self.site_1, self.site_2, self.site_2)

    @property
    def k_grid(self) -> np.ndarray:
        return momentum_grid(self.n_sites)

    def regime_report(self) -> dict[str, bool]:
        """Check the weak-coupling / large-detuning ordering the effective model assumes."""
        J = self.hopping
        gmax = max(self.couplings)
        return {
            "small_detuning": all(
                abs(w - self.omega) < max(g, 1e-12) for w, g in zip(self.atom_freqs, self.couplings)
            ),
            "weak_coupling": gmax < 0.5 * J,
            "far_detuned": abs(self.omega - self.cavity_freq) > 2 * J,
            "below_band": self.cavity_freq - 2 * J - self.omega > 5 * gmax,
        }

    def check_regime(self) -> bool:
        report = self.regime_report()
        bad = [name for name, ok in report.items() if not ok]
        if bad:
            warnings.warn(f"parameters outside the perturbative regime: {bad}", RegimeWarning)
        return not bad

    def to_config(self) -> dict[str, float | int]:
        return {
            "n_sites": self.n_sites,
            "hopping": self.hopping,
            "interaction": self.interaction,
            "cavity_freq": self.cavity_freq,
            "site_1": self.site_1,
            "site_2": self.site_2,
            "omega": self.omega,
            "omega_1": self.atom_freqs[0],
            "omega_2": self.atom_freqs[1],
            "omega_3": self.atom_freqs[2],
            "omega_4": self.atom_freqs[3],
            "g_12": self.couplings[0],
            "g_34": self.couplings[2],
        }

    @classmethod
    def from_config(cls, values: dict, convention: str = "stark") -> "ModelParams":
        """Inverse of :meth:`to_config`. Missing atom frequencies follow ``convention``."""
        unknown = set(values) - set(CONFIG_KEYS)
        if unknown:
            raise KeyError(f"unknown model keys: {sorted(unknown)}")
        kw = {}
        for key in ("n_sites", "site_1", "site_2"):
            if key in values:
                kw[key] = int(values[key])
        for key in ("hopping", "interaction", "cavity_freq"):
            if key in values:
                kw[key] = float(values[key])
        g12 = float(values.get("g_12", 0.1))
        g34 = float(values.get("g_34", 0.1))
        omega = float(values["omega"]) if "omega" in values else None
        params = cls.from_reference(omega, g12, g34, convention=convention, **kw)
        given = [f"omega_{i}" in values for i in range(1, 5)]
        if any(given):
            if not all(given):
                raise KeyError("give all of omega_1..omega_4 or none")
            freqs = tuple(float(values[f"omega_{i}"]) for i in range(1, 5))
            params = replace(params, atom_freqs=freqs)
        return params


def format_config(values: dict) -> str:
    return "".join(f"{key} = {values[key]!r}\n" for key in values)


def parse_key_values(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def save_params(params: ModelParams, path: str | Path) -> None:
    Path(path).write_text(format_config(params.to_config()))


def load_params(path: str | Path, convention: str = "stark") -> ModelParams:
    return ModelParams.from_config(parse_key_values(Path(path).read_text()), convention)


def momentum_grid(n_sites: int) -> np.ndarray:
    """Allowed ring momenta ``2 pi m / N``, folded into ``(-pi, pi]``."""
    k = 2 * np.pi * np.arange(n_sites) / n_sites
    return np.where(k > np.pi + 1e-12, k - 2 * np.pi, k)


def single_photon_dispersion(k, params: ModelParams):
    return params.cavity_freq - 2 * params.hopping * np.cos(k)


def doublon_dispersion(K, params: ModelParams):
    U, J = params.interaction, params.hopping
    return 2 * params.cavity_freq - np.sqrt(U**2 + 16 * J**2 * np.cos(K / 2) ** 2)


def doublon_band_edges(params: ModelParams) -> tuple[float, float]:
    U, J = params.interaction, params.hopping
    return 2 * params.cavity_freq - math.sqrt(U**2 + 16 * J**2), 2 * params.cavity_freq - U


def scattering_band_edges(params: ModelParams) -> tuple[float, float]:
    J = params.hopping
    return 2 * params.cavity_freq - 4 * J, 2 * params.cavity_freq + 4 * J


def inverse_localization_length(K, params: ModelParams):
    """``asinh(U / (4 J cos(K/2)))``; infinite at ``K = pi``."""
    U, J = params.interaction, params.hopping
    if U == 0:
        raise NotLocalizedError("no doublon band at U = 0")
    c = 4 * J * np.abs(np.cos(np.asarray(K, dtype=float) / 2))
    with np.errstate(divide="ignore"):
        return np.arcsinh(np.where(c > 1e-15, U / np.where(c > 1e-15, c, 1.0), np.inf))


def doublon_wavefunction(K: float, r, params: ModelParams):
    """Relative-coordinate amplitude of the doublon with COM momentum ``K``.

    ``r`` is reduced to its minimal image on the ring. At ``K = pi`` the
    doublon collapses onto a single site.
    """
    x = float(inverse_localization_length(K, params))
    r = np.asarray(r)
    n = params.n_sites
    rr = np.abs(r) % n
    rr = np.minimum(rr, n - rr)
    if math.isinf(x):
        return np.where(rr == 0, 1.0, 0.0)
    return math.sqrt(math.tanh(x)) * np.exp(-rr * x)


def group_velocity(K, params: ModelParams):
    U, J = params.interaction, params.hopping
    return 4 * J**2 * np.sin(K) / np.sqrt(U**2 + 16 * J**2 * np.cos(K / 2) ** 2)


def resonant_wavevector(omega: float, params: ModelParams) -> float:
    """Positive ``K_0`` with ``E_{K_0} = 2 omega``."""
    U, J = params.interaction, params.hopping
    c2 = ((2 * params.cavity_freq - 2 * omega) ** 2 - U**2) / (16 * J**2)
    tol = 1e-12
    if c2 < -tol or c2 > 1 + tol:
        lo, hi = doublon_band_edges(params)
        raise OutOfBandError(f"2*omega = {2 * omega:.6g} outside doublon band [{lo:.6g}, {hi:.6g}]")
    if 2 * omega > 2 * params.cavity_freq - U + tol:
        raise OutOfBandError(f"2*omega = {2 * omega:.6g} above the doublon band")
    c2 = min(max(c2, 0.0), 1.0)
    return 2 * math.acos(math.sqrt(c2))


def stark_shift(g: float, omega: float, params: ModelParams) -> float:
    """Single-photon Stark shift ``g^2 / sqrt((omega - w_c)^2 - 4J^2)`` of a far-detuned atom."""
    J = params.hopping
    d = omega - params.cavity_freq
    if d >= -2 * J:
        raise ValueError("Stark shift formula needs omega below the single-photon band")
    return g**2 / math.sqrt(d**2 - 4 * J**2)


def atom_frequencies(omega: float, couplings, params: ModelParams, convention: str = "stark"):
    if convention == "bare":
        return (float(omega),) * 4
    if convention == "stark":
        return tuple(omega + stark_shift(g, omega, params) for g in couplings)
    raise ValueError(f"unknown convention {convention!r}; use 'stark' or 'bare'")


@dataclass(frozen=True)
class DoublonModeTable:
    """Per-momentum doublon data on the ring's K grid."""

    K: np.ndarray
    energy: np.ndarray
    inv_length: np.ndarray
    interaction_ratio: np.ndarray
    velocity: np.ndarray
    f_same: np.ndarray
    f_apart: np.ndarray
    detuning: np.ndarray

    @classmethod
    def build(cls, params: ModelParams) -> "DoublonModeTable":
        from .effective import pair_doublon_coupling

        K = params.k_grid
        U, J = params.interaction, params.hopping
        with np.errstate(divide="ignore"):
            cosk = np.cos(K / 2)
            ratio = np.where(np.abs(cosk) > 1e-15, U / (4 * J * np.where(np.abs(cosk) > 1e-15, cosk, 1)), np.inf)
        energy = doublon_dispersion(K, params)
        return cls(
            K=K,
            energy=energy,
            inv_length=inverse_localization_length(K, params),
            interaction_ratio=ratio,
            velocity=group_velocity(K, params),
            f_same=pair_doublon_coupling(K, 0, params),
            f_apart=pair_doublon_coupling(K, params.delta_n, params),
            detuning=energy - 2 * params.omega,
        )
