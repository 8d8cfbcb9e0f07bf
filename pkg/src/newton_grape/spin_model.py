"""Liouville-space drift, control and state builders for small spin-1/2 systems.

Density operators are vectorized row-major, so a Hamiltonian H acts on state
vectors through the commutation superoperator ``kron(H, 1) - kron(1, H.T)``.
All frequencies are stored in Hz at the description level and converted to
rad/s once, when operators are built.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

__all__ = [
    "GYROMAGNETIC_RATIOS",
    "SpinSystem",
    "ChannelSpec",
    "StateSpec",
    "StateVector",
    "build_single_spin_operators",
    "spin_operator",
    "commutation_superoperator",
    "build_drift",
    "build_controls",
    "build_state",
    "offset_hz_from_ppm",
]

# Gyromagnetic ratios in rad s^-1 T^-1 (IUPAC recommended values,
# R.K. Harris et al., Pure Appl. Chem. 73 (2001) 1795).
GYROMAGNETIC_RATIOS: dict[str, float] = {
    "1H": 26.7522128e7,
    "13C": 6.728284e7,
    "19F": 25.18148e7,
    "14N": 1.9337792e7,
}


def build_single_spin_operators() -> tuple[NDArray[np.complex128], ...]:
    """Return the spin-1/2 operator triple (Lx, Ly, Lz) as 2x2 matrices."""
    lx = np.array([[0.0, 0.5], [0.5, 0.0]], dtype=complex)
    ly = np.array([[0.0, -0.5j], [0.5j, 0.0]], dtype=complex)
    lz = np.array([[0.5, 0.0], [0.0, -0.5]], dtype=complex)
    return lx, ly, lz


@dataclass(frozen=True)
class SpinSystem:
    """Declarative description of a coupled spin-1/2 system.

    Parameters
    ----------
    spins : sequence of isotope labels, e.g. ``("1H", "13C", "19F")``.
    magnet_field : static field in tesla.
    offsets_hz : per-spin resonance offset in Hz.
    j_couplings_hz : map from spin-index pair (i, j), i < j, to the scalar
        coupling in Hz.  Symmetry is normalized on construction.
    relaxation : optional Liouville-space relaxation superoperator in rad/s
        (dimension ``4**nspins``); entered into propagators as ``+iR``
        downstream, never folded into the drift here.
    """

    spins: tuple[str, ...]
    magnet_field: float
    offsets_hz: tuple[float, ...]
    j_couplings_hz: dict[tuple[int, int], float] = field(default_factory=dict)
    relaxation: NDArray[np.complex128] | None = None

    def __post_init__(self):
        object.__setattr__(self, "spins", tuple(self.spins))
        object.__setattr__(self, "offsets_hz", tuple(float(v) for v in self.offsets_hz))
        for iso in self.spins:
            if iso not in GYROMAGNETIC_RATIOS:
                raise ValueError(f"unknown isotope {iso!r}; known: {sorted(GYROMAGNETIC_RATIOS)}")
        if self.magnet_field <= 0:
            raise ValueError("magnet_field must be positive")
        if len(self.offsets_hz) != len(self.spins):
            raise ValueError("offsets_hz must have one entry per spin")
        couplings: dict[tuple[int, int], float] = {}
        for (i, j), val in self.j_couplings_hz.items():
            if i == j:
                raise ValueError("j_couplings_hz diagonal must be zero (self-coupling)")
            if not (0 <= i < self.nspins and 0 <= j < self.nspins):
                raise ValueError(f"coupling ({i}, {j}) references unknown spin")
            key = (min(i, j), max(i, j))
            if key in couplings and couplings[key] != float(val):
                raise ValueError(f"conflicting values for coupling {key}")
            couplings[key] = float(val)
        object.__setattr__(self, "j_couplings_hz", couplings)
        if self.relaxation is not None:
            r = np.asarray(self.relaxation, dtype=complex)
            if r.shape != (self.liouville_dim, self.liouville_dim):
                raise ValueError(
                    f"relaxation matrix shape {r.shape} does not match "
                    f"Liouville dimension {self.liouville_dim} for {self.nspins} spins"
                )
            object.__setattr__(self, "relaxation", r)

    @property
    def nspins(self) -> int:
        return len(self.spins)

    @property
    def hilbert_dim(self) -> int:
        return 2 ** self.nspins

    @property
    def liouville_dim(self) -> int:
        return 4 ** self.nspins

    def gamma(self, index: int) -> float:
        """Gyromagnetic ratio of spin `index` in rad/s/T."""
        return GYROMAGNETIC_RATIOS[self.spins[index]]


@dataclass(frozen=True)
class ChannelSpec:
    """One control channel: a set of spins driven along the x or y axis."""

    spins: tuple[int, ...]
    axis: str
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "spins", tuple(self.spins))
        if self.axis not in ("x", "y"):
            raise ValueError(f"axis must be 'x' or 'y', got {self.axis!r}")


@dataclass(frozen=True)
class StateSpec:
    """State description: 'lz' (sum of Lz over spins) or 'singlet' (two spins)."""

    kind: str
    spins: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "spins", tuple(self.spins))
        if self.kind not in ("lz", "singlet"):
            raise ValueError(f"unknown state kind {self.kind!r}")
        if self.kind == "singlet" and len(self.spins) != 2:
            raise ValueError("singlet state requires exactly two spins")


@dataclass(frozen=True)
class StateVector:
    """Unit-norm coefficient vector over the vectorized matrix basis."""

    coefficients: NDArray[np.complex128]


def offset_hz_from_ppm(isotope: str, magnet_field: float, ppm: float) -> float:
    """Chemical shift in ppm -> resonance offset in Hz at the given field."""
    gamma = GYROMAGNETIC_RATIOS[isotope]
    return gamma * magnet_field * ppm * 1e-6 / (2.0 * np.pi)


def spin_operator(nspins: int, index: int, axis: str) -> NDArray[np.complex128]:
    """Hilbert-space single-spin operator L_axis on spin `index` (0-based)."""
    lx, ly, lz = build_single_spin_operators()
    op = {"x": lx, "y": ly, "z": lz}[axis]
    out = np.array([[1.0 + 0j]])
    for k in range(nspins):
        out = np.kron(out, op if k == index else np.eye(2, dtype=complex))
    return out


def commutation_superoperator(h: NDArray[np.complex128]) -> NDArray[np.complex128]:
    """Superoperator of [H, .] acting on row-major vectorized operators."""
    ident = np.eye(h.shape[0], dtype=complex)
    return np.kron(h, ident) - np.kron(ident, h.T)


def _hilbert_drift(system: SpinSystem) -> NDArray[np.complex128]:
    n = system.nspins
    h = np.zeros((system.hilbert_dim, system.hilbert_dim), dtype=complex)
    for i, off in enumerate(system.offsets_hz):
        if off != 0.0:
            h += 2.0 * np.pi * off * spin_operator(n, i, "z")
    for (i, j), jhz in system.j_couplings_hz.items():
        if jhz == 0.0:
            continue
        # Strong-coupling scalar product L(i).L(j).
        coupling = sum(
            spin_operator(n, i, ax) @ spin_operator(n, j, ax) for ax in ("x", "y", "z")
        )
        h += 2.0 * np.pi * jhz * coupling
    return h


def build_drift(system: SpinSystem) -> NDArray[np.complex128]:
    """Liouville-space drift commutation superoperator in rad/s.

    Offsets and J couplings are converted from Hz with a single 2*pi factor.
    The relaxation operator, if present on the system, is not folded in here;
    it enters the slice propagators as +iR at problem assembly.
    """
    return commutation_superoperator(_hilbert_drift(system))


def build_controls(
    system: SpinSystem, channels: list[ChannelSpec]
) -> list[NDArray[np.complex128]]:
    """Control commutation superoperators, one per channel.

    Amplitudes multiplying these operators are in rad/s; nominal powers
    quoted in Hz pick up their 2*pi at problem assembly, not here.
    """
    out = []
    for chan in channels:
        for s in chan.spins:
            if not 0 <= s < system.nspins:
                raise ValueError(f"channel {chan.label or chan.axis!r} references unknown spin {s}")
        h = np.zeros((system.hilbert_dim, system.hilbert_dim), dtype=complex)
        for s in chan.spins:
            h += spin_operator(system.nspins, s, chan.axis)
        out.append(commutation_superoperator(h))
    return out


def _singlet_matrix(system: SpinSystem, spins: tuple[int, int]) -> NDArray[np.complex128]:
    i, j = spins
    # Traceless part of |S><S|, S = (|ud> - |du>)/sqrt(2), equals -L(i).L(j).
    return -sum(
        spin_operator(system.nspins, i, ax) @ spin_operator(system.nspins, j, ax)
        for ax in ("x", "y", "z")
    )


def build_state(system: SpinSystem, spec: StateSpec) -> StateVector:
    """Build a unit-norm state vector for the named operator."""
    for s in spec.spins:
        if not 0 <= s < system.nspins:
            raise ValueError(f"state spec references unknown spin {s}")
    if spec.kind == "lz":
        mat = sum(spin_operator(system.nspins, s, "z") for s in spec.spins)
    else:
        mat = _singlet_matrix(system, spec.spins)  # type: ignore[arg-type]
    vec = np.asarray(mat, dtype=complex).ravel()
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise ValueError("state operator is zero; cannot normalize")
    return StateVector(vec / norm)
