"""Benchmark configuration: JSON schema, validation, presets and assembly.

Configs are plain JSON with no code; unknown keys are rejected everywhere.
Spin indices in configs are 1-based (as in the spectroscopy literature) and
converted to 0-based internally.  The built-in presets reproduce the two
benchmark problems: "hcf" (three-spin longitudinal transfer under a 10 kHz
spillout envelope) and "singlet" (two-spin singlet preparation optimized
over a ten-member power-miscalibration ensemble).
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .expm_cache import ExpmCache
from .grape_core import ControlProblem, ControlSequence, PenaltySpec, diff_matrix
from .optimizer import LineSearchSettings, OptimSettings, RegularizerSettings
from .spin_model import (
    ChannelSpec,
    SpinSystem,
    StateSpec,
    build_controls,
    build_drift,
    build_state,
    offset_hz_from_ppm,
)

__all__ = ["BenchConfig", "ConfigError", "load_config", "preset_config", "PRESETS"]

TWO_PI = 2.0 * math.pi


class ConfigError(ValueError):
    """Invalid configuration file or semantic validation failure."""


def _require_keys(block: dict, allowed: set[str], required: set[str], where: str):
    unknown = set(block) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    missing = required - set(block)
    if missing:
        raise ConfigError(f"missing keys in {where}: {sorted(missing)}")


@dataclass
class BenchConfig:
    """Validated benchmark description, still in user-facing units (Hz/ppm)."""

    raw: dict[str, Any]

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BenchConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        _require_keys(
            data,
            {"spin_system", "controls", "transfer", "penalties", "optimizer",
             "cache", "output", "seed"},
            {"spin_system", "controls", "transfer"},
            "config root",
        )
        cfg = cls(raw=copy.deepcopy(data))
        cfg._validate()
        return cfg

    # -- validation ---------------------------------------------------------

    def _validate(self):
        self._validate_spin_system()
        self._validate_controls()
        self._validate_transfer()
        for i, block in enumerate(self.raw.get("penalties", [])):
            self._validate_penalty(block, f"penalties[{i}]")
        self._validate_optimizer()
        self._validate_cache()
        self._validate_output()
        seed = self.raw.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigError("seed must be an integer")

    def _validate_spin_system(self):
        block = self.raw["spin_system"]
        _require_keys(
            block,
            {"isotopes", "field_tesla", "offsets_hz", "offsets_ppm", "j_couplings_hz"},
            {"isotopes", "field_tesla"},
            "spin_system",
        )
        nspins = len(block["isotopes"])
        if nspins < 1:
            raise ConfigError("spin_system.isotopes must not be empty")
        if ("offsets_hz" in block) == ("offsets_ppm" in block):
            raise ConfigError("give exactly one of offsets_hz or offsets_ppm")
        offsets = block.get("offsets_hz", block.get("offsets_ppm"))
        if len(offsets) != nspins:
            raise ConfigError("offsets must have one entry per spin")
        for item in block.get("j_couplings_hz", []):
            if len(item) != 3:
                raise ConfigError("j_couplings_hz entries are [spin_i, spin_j, hz]")
            i, j, _ = item
            if not (1 <= i <= nspins and 1 <= j <= nspins) or i == j:
                raise ConfigError(f"bad coupling pair ({i}, {j}); spins are 1-based")

    def _validate_controls(self):
        block = self.raw["controls"]
        _require_keys(
            block,
            {"channels", "n_slices", "duration_s", "nominal_power_hz",
             "initial_guess_fraction", "ensemble_scalings"},
            {"channels", "n_slices", "duration_s", "nominal_power_hz"},
            "controls",
        )
        if int(block["n_slices"]) < 1:
            raise ConfigError("controls.n_slices must be >= 1")
        if float(block["duration_s"]) <= 0:
            raise ConfigError("controls.duration_s must be positive")
        if float(block["nominal_power_hz"]) <= 0:
            raise ConfigError("controls.nominal_power_hz must be positive")
        nspins = len(self.raw["spin_system"]["isotopes"])
        for i, chan in enumerate(block["channels"]):
            _require_keys(chan, {"spins", "axis", "label"}, {"spins", "axis"}, f"channels[{i}]")
            for s in chan["spins"]:
                if not 1 <= s <= nspins:
                    raise ConfigError(f"channels[{i}] references unknown spin {s}")
            if chan["axis"] not in ("x", "y"):
                raise ConfigError(f"channels[{i}].axis must be 'x' or 'y'")
        scalings = block.get("ensemble_scalings", [1.0])
        if not scalings or any(s <= 0 for s in scalings):
            raise ConfigError("ensemble_scalings must be positive")

    def _validate_transfer(self):
        block = self.raw["transfer"]
        _require_keys(block, {"initial", "target"}, {"initial", "target"}, "transfer")
        nspins = len(self.raw["spin_system"]["isotopes"])
        for name in ("initial", "target"):
            spec = block[name]
            _require_keys(spec, {"kind", "spins"}, {"kind", "spins"}, f"transfer.{name}")
            if spec["kind"] not in ("lz", "singlet"):
                raise ConfigError(f"transfer.{name}.kind must be 'lz' or 'singlet'")
            for s in spec["spins"]:
                if not 1 <= s <= nspins:
                    raise ConfigError(f"transfer.{name} references unknown spin {s}")
            if spec["kind"] == "singlet" and len(spec["spins"]) != 2:
                raise ConfigError("singlet states take exactly two spins")

    def _validate_penalty(self, block: dict, where: str):
        kind = block.get("kind")
        if kind == "norm_square":
            _require_keys(block, {"kind", "weight"}, {"kind", "weight"}, where)
        elif kind == "derivative_norm_square":
            _require_keys(block, {"kind", "weight", "order"}, {"kind", "weight"}, where)
            if block.get("order", 1) not in (1, 2):
                raise ConfigError(f"{where}.order must be 1 or 2")
        elif kind == "spillout":
            _require_keys(block, {"kind", "weight", "bound_hz"}, {"kind", "weight", "bound_hz"}, where)
            if float(block["bound_hz"]) <= 0:
                raise ConfigError(f"{where}.bound_hz must be positive")
        else:
            raise ConfigError(f"{where}.kind must be one of norm_square, "
                              "derivative_norm_square, spillout")
        if float(block["weight"]) < 0:
            raise ConfigError(f"{where}.weight must be nonnegative")

    def _validate_optimizer(self):
        block = self.raw.get("optimizer", {})
        _require_keys(
            block,
            {"method", "max_iterations", "grad_tol", "trajectory_budget",
             "target_fidelity", "lbfgs_memory", "regularizer", "line_search"},
            set(),
            "optimizer",
        )
        method = block.get("method", "newton_rfo")
        if method not in ("grad_descent", "lbfgs", "bfgs", "newton_trm", "newton_rfo"):
            raise ConfigError(f"unknown optimizer.method {method!r}")
        reg = block.get("regularizer", {})
        _require_keys(
            reg,
            {"delta", "phi", "alpha_max", "cond_power", "trm_variant", "growth_phi"},
            set(),
            "optimizer.regularizer",
        )
        ls = block.get("line_search", {})
        _require_keys(ls, {"c1", "c2", "max_evals"}, set(), "optimizer.line_search")
        try:
            self.optimizer_settings()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def _validate_cache(self):
        block = self.raw.get("cache", {})
        _require_keys(block, {"enabled", "threshold", "directory", "paranoid"}, set(), "cache")

    def _validate_output(self):
        block = self.raw.get("output", {})
        _require_keys(block, {"j_max"}, set(), "output")
        if float(block.get("j_max", 1.0)) <= 0:
            raise ConfigError("output.j_max must be positive")

    # -- accessors ----------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    @property
    def j_max(self) -> float:
        return float(self.raw.get("output", {}).get("j_max", 1.0))

    @property
    def method(self) -> str:
        return self.raw.get("optimizer", {}).get("method", "newton_rfo")

    def channel_labels(self) -> list[str]:
        labels = []
        isotopes = self.raw["spin_system"]["isotopes"]
        for chan in self.raw["controls"]["channels"]:
            if chan.get("label"):
                labels.append(chan["label"])
            else:
                names = "".join(isotopes[s - 1].lstrip("0123456789") for s in chan["spins"])
                labels.append(f"{names}{chan['axis']}")
        return labels

    def spin_system(self) -> SpinSystem:
        block = self.raw["spin_system"]
        isotopes = tuple(block["isotopes"])
        field_t = float(block["field_tesla"])
        if "offsets_hz" in block:
            offsets = tuple(float(v) for v in block["offsets_hz"])
        else:
            offsets = tuple(
                offset_hz_from_ppm(iso, field_t, float(ppm))
                for iso, ppm in zip(isotopes, block["offsets_ppm"])
            )
        couplings = {
            (int(i) - 1, int(j) - 1): float(hz)
            for i, j, hz in block.get("j_couplings_hz", [])
        }
        return SpinSystem(isotopes, field_t, offsets, couplings)

    def optimizer_settings(self) -> OptimSettings:
        block = self.raw.get("optimizer", {})
        reg = block.get("regularizer", {})
        ls = block.get("line_search", {})
        return OptimSettings(
            grad_tol=float(block.get("grad_tol", 1e-6)),
            max_iterations=int(block.get("max_iterations", 200)),
            trajectory_budget=block.get("trajectory_budget"),
            target_objective=block.get("target_fidelity"),
            lbfgs_memory=int(block.get("lbfgs_memory", 20)),
            regularizer=RegularizerSettings(
                delta=float(reg.get("delta", 1.0)),
                phi=float(reg.get("phi", 0.9)),
                alpha_max=float(reg.get("alpha_max", 1.0)),
                cond_power=int(reg.get("cond_power", 3)),
                trm_variant=reg.get("trm_variant", "iterative"),
                growth_phi=reg.get("growth_phi"),
            ),
            line_search=LineSearchSettings(
                c1=float(ls.get("c1", 1e-4)),
                c2=float(ls.get("c2", 0.9)),
                max_evals=int(ls.get("max_evals", 20)),
            ),
        )

    def make_cache(self) -> ExpmCache | None:
        block = self.raw.get("cache", {})
        if not block.get("enabled", False):
            return None
        return ExpmCache(
            threshold=int(block.get("threshold", 512)),
            directory=block.get("directory"),
            paranoid=bool(block.get("paranoid", False)),
        )

    # -- assembly -----------------------------------------------------------

    def assemble_problem(self) -> ControlProblem:
        """Build the Liouville-space problem; the single 2*pi conversion of
        user-facing Hz quantities happens here."""
        system = self.spin_system()
        ctrl_block = self.raw["controls"]
        channels = [
            ChannelSpec(tuple(s - 1 for s in chan["spins"]), chan["axis"],
                        chan.get("label", ""))
            for chan in ctrl_block["channels"]
        ]
        drift = build_drift(system)
        if system.relaxation is not None:
            drift = drift + 1j * system.relaxation
        controls = build_controls(system, channels)
        n_slices = int(ctrl_block["n_slices"])
        dt = float(ctrl_block["duration_s"]) / n_slices
        nvar = len(channels) * n_slices

        penalties = []
        for block in self.raw.get("penalties", []):
            weight = float(block["weight"])
            if block["kind"] == "norm_square":
                penalties.append(
                    PenaltySpec("norm_square", np.full(nvar, weight))
                )
            elif block["kind"] == "spillout":
                bound = TWO_PI * float(block["bound_hz"])
                penalties.append(
                    PenaltySpec(
                        "spillout",
                        np.full(nvar, weight),
                        upper=np.full(nvar, bound),
                        lower=np.full(nvar, -bound),
                    )
                )
            else:
                dmat = diff_matrix(nvar, int(block.get("order", 1)), dt)
                penalties.append(
                    PenaltySpec(
                        "derivative_norm_square",
                        np.full(nvar, weight),
                        transform=dmat,
                    )
                )

        def state(which: str):
            spec = self.raw["transfer"][which]
            return build_state(
                system, StateSpec(spec["kind"], tuple(s - 1 for s in spec["spins"]))
            )

        return ControlProblem(
            drift=drift,
            controls=tuple(controls),
            rho0=state("initial"),
            delta=state("target"),
            dt=dt,
            n_slices=n_slices,
            penalties=tuple(penalties),
            ensemble_scalings=tuple(ctrl_block.get("ensemble_scalings", [1.0])),
        )

    def initial_sequence(self, seed: int | None = None) -> ControlSequence:
        """Seeded low-power random waveform, uniform within a fraction of the
        nominal power (the only randomness in a run)."""
        ctrl_block = self.raw["controls"]
        k = len(ctrl_block["channels"])
        n = int(ctrl_block["n_slices"])
        frac = float(ctrl_block.get("initial_guess_fraction", 0.05))
        scale = frac * TWO_PI * float(ctrl_block["nominal_power_hz"])
        rng = np.random.default_rng(self.seed if seed is None else seed)
        return ControlSequence(rng.uniform(-1.0, 1.0, (k, n)) * scale)


def load_config(path: str) -> BenchConfig:
    """Parse and validate a JSON config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config parse error in {path}: line {exc.lineno}, "
                          f"column {exc.colno}: {exc.msg}") from exc
    return BenchConfig.from_dict(data)


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


# Spillout weight: a 10% excursion over the 10 kHz bound at one time point
# costs about 0.01 fidelity units.
_HCF_SPILLOUT_WEIGHT = 1.0 / (TWO_PI * 10_000.0) ** 2
# Norm-square weight: running every point at nominal power costs 0.05.
_SINGLET_NORM_WEIGHT = 0.05 / (100 * (TWO_PI * 60.0) ** 2)

PRESETS: dict[str, dict] = {
    "hcf": {
        "spin_system": {
            "isotopes": ["1H", "13C", "19F"],
            "field_tesla": 9.4,
            "offsets_hz": [0.0, 0.0, 0.0],
            "j_couplings_hz": [[1, 2, 140.0], [2, 3, -160.0]],
        },
        "controls": {
            "channels": [
                {"spins": [1], "axis": "x", "label": "Hx"},
                {"spins": [1], "axis": "y", "label": "Hy"},
                {"spins": [2], "axis": "x", "label": "Cx"},
                {"spins": [2], "axis": "y", "label": "Cy"},
                {"spins": [3], "axis": "x", "label": "Fx"},
                {"spins": [3], "axis": "y", "label": "Fy"},
            ],
            "n_slices": 50,
            "duration_s": 0.1,
            "nominal_power_hz": 10_000.0,
            "initial_guess_fraction": 0.05,
        },
        "transfer": {
            "initial": {"kind": "lz", "spins": [1]},
            "target": {"kind": "lz", "spins": [3]},
        },
        "penalties": [
            {"kind": "spillout", "weight": _HCF_SPILLOUT_WEIGHT, "bound_hz": 10_000.0},
        ],
        "optimizer": {
            "method": "newton_rfo",
            "max_iterations": 500,
            "trajectory_budget": 2000,
        },
        "output": {"j_max": 1.0},
        "seed": 1,
    },
    "singlet": {
        "spin_system": {
            "isotopes": ["13C", "13C"],
            "field_tesla": 14.1,
            "offsets_ppm": [0.0, 0.25],
            "j_couplings_hz": [[1, 2, 60.0]],
        },
        "controls": {
            "channels": [
                {"spins": [1, 2], "axis": "x", "label": "Cx"},
                {"spins": [1, 2], "axis": "y", "label": "Cy"},
            ],
            "n_slices": 50,
            "duration_s": 0.05,
            "nominal_power_hz": 60.0,
            "initial_guess_fraction": 0.05,
            "ensemble_scalings": [float(s) for s in np.linspace(0.8, 1.2, 10)],
        },
        "transfer": {
            "initial": {"kind": "lz", "spins": [1, 2]},
            "target": {"kind": "singlet", "spins": [1, 2]},
        },
        "penalties": [
            {"kind": "norm_square", "weight": _SINGLET_NORM_WEIGHT},
        ],
        "optimizer": {
            "method": "newton_rfo",
            "max_iterations": 500,
            "trajectory_budget": 1500,
        },
        "output": {"j_max": 1.0},
        "seed": 1,
    },
}


def preset_config(name: str, overrides: dict | None = None) -> BenchConfig:
    """Built-in benchmark preset, optionally with a partial config merged in."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    data = PRESETS[name]
    if overrides:
        data = _deep_merge(data, overrides)
    return BenchConfig.from_dict(data)
