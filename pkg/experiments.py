"""Scenario runner for the simulator experiments.

Named scenarios (homogeneous field, single and cascaded Stern-Gerlach, spin-1
cascade, Bell test, interference walk) are read from JSON into a frozen
:class:`ScenarioConfig`, dispatched to the physics modules block by block,
reduced in particle order and written out as CSV/JSON artifacts that depend
only on the seed and the configuration.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import partial
from typing import Any, Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.signal import find_peaks
from scipy.stats import chisquare

from config import Config
from entanglement import (
    ArrivalModel,
    ArrivalRecord,
    CoincidenceRecord,
    arrival_times,
    branches_agree,
    chsh_statistic,
    coincidence_M0,
    correlation,
    delta_T_correction,
    herald_branch,
    joint_pmf,
    pair_spins,
    tilde_M,
)
from errors import ConfigError, ForbiddenResetError
from expected_motion import KinematicCoeffs, ensemble_centre, integrate_trajectory, position_pdf, transport_positions
from oracle import compare_distributions, densities_from_spinor, gaussian_source, packet_from_ensemble, sg_propagate, wigner_reference
from particles import (
    FieldSpec,
    PolarizationSpec,
    RngStream,
    Source,
    SourceEnsemble,
    block_ranges,
    plane_vector,
    prepare_block,
    prepare_emission,
    single_source,
    validate_spin_number,
)
from spin_half import (
    MagneticForceField,
    SpinHalfState,
    analytic_spin_pmf,
    cascade_pmf,
    persistence_flips,
    polarization_from_spinor,
    sample_spin,
    spin_external_reset,
    spinor_from_polarization,
)
from spin_higher import HigherSpinState, higher_er, sample_spin1, sample_spin_general, spin1_cascade_pmf, spin1_pmf
from utils.tables import config_hash, write_csv, write_json
from walk import LatticeWalker, WalkScenario, first_passage_times, run_walk_ensemble

logger = logging.getLogger(__name__)

CODE_VERSION = "0.1.0"
KINDS = ("homogeneous", "sg_single", "sg_cascade", "spin1_cascade", "bell", "walk")
MODES = ("expected_motion", "microscopic")
OVERRIDABLE = ("seed", "n_p", "mode", "threads", "out_dir")

# Left out of the config echo so outputs do not depend on where or how fast a run happened
ECHO_EXCLUDED = ("threads", "out_dir")

ACCEPTANCE_FLOOR = 0.01
SPIN_HALF_VALUES = (1, -1)
SPIN_ONE_VALUES = (1, 0, -1)
COINCIDENCE_COLUMNS = ["pair_first", "pair_second", "spin_first", "spin_second", "time_first", "time_second", "gap"]


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str
    seed: int = 0
    n_p: int = 10_000
    spin: float = 0.5
    mode: str = "expected_motion"
    ensemble: SourceEnsemble = dataclasses.field(default_factory=single_source)
    magnet: FieldSpec = dataclasses.field(default_factory=FieldSpec)
    angles: Tuple[float, ...] = (0.0,)
    plane: Tuple[int, int] = (2, 0)
    mu_m: float = 1.0
    eta: float = 0.0
    renormalize: bool = False
    steps: int = 64
    n_train: int = 0
    persistence_steps: int = 50
    chi0: Optional[Tuple[Tuple[float, float], Tuple[float, float]]] = None
    arrival: ArrivalModel = dataclasses.field(default_factory=ArrivalModel)
    chsh: Optional[Tuple[Tuple[float, float], Tuple[float, float]]] = None
    filter_tau: float = Config.FILTER_TIME_CONSTANT
    threads: int = 1
    out_dir: Optional[str] = None

    @property
    def spinor(self) -> Optional[np.ndarray]:
        if self.chi0 is None:
            return None
        chi = np.array([complex(re, im) for re, im in self.chi0])
        return chi / np.linalg.norm(chi)

    def echo(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        for key in ECHO_EXCLUDED:
            data.pop(key)
        data["field"] = data.pop("magnet")
        return data

    def validate(self) -> "ScenarioConfig":
        if self.kind not in KINDS:
            raise ConfigError("kind", f"unknown scenario kind {self.kind!r}")
        if self.mode not in MODES:
            raise ConfigError("mode", f"unknown mode {self.mode!r}")
        if self.n_p < 0:
            raise ConfigError("n_p", "particle count must be non-negative")
        try:
            spin = validate_spin_number(self.spin)
        except ConfigError as exc:
            raise ConfigError("spin", exc.message) from exc
        expected_spin = 1.0 if self.kind == "spin1_cascade" else 0.5
        if self.kind != "walk" and spin != expected_spin:
            raise ConfigError("spin", f"{self.kind} runs with S={expected_spin:g}")
        if self.steps < 1:
            raise ConfigError("steps", "at least one iteration is required")
        if self.n_train < 0 or self.persistence_steps < 0:
            raise ConfigError("n_train" if self.n_train < 0 else "persistence_steps", "must be non-negative")
        if self.threads < 1:
            raise ConfigError("threads", "at least one worker thread is required")
        if self.filter_tau < 1.0:
            raise ConfigError("filter_tau", "filter time constant must be at least one iteration")
        if not self.angles:
            raise ConfigError("angles", "at least one angle is required")
        if len(set(self.plane)) != 2 or not all(0 <= a < 3 for a in self.plane):
            raise ConfigError("plane", f"invalid plane axes {self.plane}")
        self.ensemble.validate("ensemble")
        self.magnet.validate("field")
        self.arrival.validate("arrival")

        polarization = self.ensemble.polarization
        if self.kind in ("homogeneous", "sg_single") and polarization.mode != "fixed":
            raise ConfigError("ensemble.polarization.mode", f"{self.kind} needs a fixed initial polarization")
        if self.kind in ("sg_single", "walk") and len(self.ensemble.active_dims) != 1:
            raise ConfigError("ensemble.active_dims", f"{self.kind} profiles are one-dimensional")
        if self.kind in ("sg_single", "walk") and self.ensemble.rho_mode != "fixed":
            raise ConfigError("ensemble.rho_mode", "profiles need a fixed momentum polarization")
        if self.kind == "sg_single":
            axis = np.zeros(3)
            axis[self.ensemble.active_dims[0]] = 1.0
            if not (np.allclose(self.magnet.lam, axis) and np.allclose(self.magnet.nu, axis)):
                raise ConfigError("field.direction", "the single-SG field must point along the profile axis")
        if self.kind == "bell":
            if not self.ensemble.pair_mode:
                raise ConfigError("ensemble.pair_mode", "the Bell scenario emits pairs")
            if polarization.mode != "grid":
                raise ConfigError("ensemble.polarization.mode", "the Bell scenario draws polarizations on a grid")
        return self


def default_scenario(kind: str) -> ScenarioConfig:
    x1 = (1.0, 0.0, 0.0)
    x3 = (0.0, 0.0, 1.0)
    if kind == "homogeneous":
        return ScenarioConfig(
            kind=kind,
            n_p=100_000,
            ensemble=single_source(polarization=PolarizationSpec(mode="fixed", direction=x3)),
            angles=tuple(k * math.pi / 12.0 for k in range(12)),
        )
    if kind == "sg_single":
        half = 1.0 / math.sqrt(2.0)
        return ScenarioConfig(
            kind=kind,
            n_p=10_000,
            ensemble=gaussian_source(9, axis=2, polarization=PolarizationSpec(mode="fixed", direction=x1)),
            magnet=FieldSpec(direction=x3, b_f=0.1 / math.pi**2, gradient=x3),
            chi0=((half, 0.0), (half, 0.0)),
        )
    if kind == "sg_cascade":
        return ScenarioConfig(
            kind=kind,
            n_p=200_000,
            ensemble=single_source(polarization=PolarizationSpec(mode="sphere")),
            angles=tuple(float(a) for a in np.linspace(0.0, math.pi, 6)),
        )
    if kind == "spin1_cascade":
        return ScenarioConfig(
            kind=kind,
            n_p=300_000,
            spin=1.0,
            ensemble=single_source(polarization=PolarizationSpec(mode="sphere")),
            angles=tuple(float(math.acos(y)) for y in (1.0, 0.5, 0.0, -0.5, -1.0)),
        )
    if kind == "bell":
        return ScenarioConfig(
            kind=kind,
            n_p=10_000,
            ensemble=single_source(
                pair_mode=True, s0_sampling="stratified", polarization=PolarizationSpec(mode="grid", n_mu=16)
            ),
            magnet=FieldSpec(b_m=0.04, b_f=0.04, region=(1, None)),
            angles=tuple(float(a) for a in np.linspace(0.0, math.pi, 21)),
            arrival=ArrivalModel(mu_b=0.04),
            chsh=((0.0, math.pi / 2.0), (math.pi / 4.0, 3.0 * math.pi / 4.0)),
        )
    if kind == "walk":
        sources = (Source(position=(-2, 0, 0), probability=0.5), Source(position=(2, 0, 0), probability=0.5))
        return ScenarioConfig(
            kind=kind,
            n_p=10_000,
            mode="microscopic",
            ensemble=SourceEnsemble(sources=sources, active_dims=(0,), rho=(1.0, 0.0, 0.0)),
            n_train=10_000,
        )
    raise ConfigError("kind", f"unknown scenario kind {kind!r}")


def _fail(path: str, message: str):
    raise ConfigError(path, message)


def _number(data: Mapping[str, Any], key: str, prefix: str, default, cast: Callable = float):
    if key not in data or data[key] is None:
        return default
    try:
        return cast(data[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix}{key}", f"invalid value {data[key]!r}") from exc


def _vector(value, path: str, length: int = 3, cast: Callable = float) -> tuple:
    if not isinstance(value, (list, tuple)) or len(value) != length:
        _fail(path, f"expected a list of {length} numbers")
    try:
        return tuple(cast(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, "expected numbers") from exc


def _mapping(value, path: str) -> Mapping[str, Any]:
    if not isinstance(value, Mapping):
        _fail(path, "expected an object")
    return value


def _parse_angles(value, path: str = "angles") -> Tuple[float, ...]:
    if isinstance(value, Mapping):
        if "cosines" in value:
            cosines = value["cosines"]
            if not isinstance(cosines, list) or any(abs(float(y)) > 1.0 for y in cosines):
                _fail(f"{path}.cosines", "cosines must be numbers in [-1, 1]")
            return tuple(float(math.acos(float(y))) for y in cosines)
        start = _number(value, "start", f"{path}.", None)
        stop = _number(value, "stop", f"{path}.", None)
        count = _number(value, "count", f"{path}.", None, int)
        if start is None or stop is None or count is None or count < 1:
            _fail(path, "a range needs start, stop and a positive count")
        return tuple(float(a) for a in np.linspace(start, stop, count))
    if isinstance(value, (list, tuple)):
        try:
            return tuple(float(a) for a in value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(path, "angles must be numbers (radians)") from exc
    return _fail(path, "expected a list of angles or a {start, stop, count} range")


def _parse_polarization(data, path: str, default: PolarizationSpec) -> PolarizationSpec:
    data = _mapping(data, path)
    return replace(
        default,
        mode=str(data.get("mode", default.mode)),
        direction=_vector(data["direction"], f"{path}.direction") if data.get("direction") is not None else default.direction,
        n_mu=_number(data, "n_mu", f"{path}.", default.n_mu, int),
        plane=_vector(data["plane"], f"{path}.plane", 2, int) if "plane" in data else default.plane,
        offset=_number(data, "offset", f"{path}.", default.offset),
    )


def _parse_sources(items, path: str) -> Tuple[Source, ...]:
    if not isinstance(items, list) or not items:
        _fail(path, "expected a non-empty list of sources")
    sources = []
    for i, item in enumerate(items):
        item = _mapping(item, f"{path}[{i}]")
        if "position" not in item:
            _fail(f"{path}[{i}].position", "missing source position")
        sources.append(
            Source(
                position=_vector(item["position"], f"{path}[{i}].position", cast=int),
                probability=_number(item, "probability", f"{path}[{i}].", 1.0 / len(items)),
                phase=_vector(item.get("phase", [0, 0, 0]), f"{path}[{i}].phase"),
            )
        )
    return tuple(sources)


def _parse_ensemble(data, path: str, default: SourceEnsemble) -> SourceEnsemble:
    data = _mapping(data, path)
    ensemble = default
    if "gaussian" in data:
        gaussian = _mapping(data["gaussian"], f"{path}.gaussian")
        n_s = _number(gaussian, "n_s", f"{path}.gaussian.", 9, int)
        if n_s < 1 or n_s % 2 == 0:
            _fail(f"{path}.gaussian.n_s", f"Gaussian source needs an odd source count, got {n_s}")
        axis = _number(gaussian, "axis", f"{path}.gaussian.", 2, int)
        if not 0 <= axis < 3:
            _fail(f"{path}.gaussian.axis", f"invalid axis {axis}")
        m = _vector(gaussian.get("m", [0, 0, 0]), f"{path}.gaussian.m")
        ensemble = gaussian_source(n_s, m, axis, default.polarization)
    elif "sources" in data:
        ensemble = replace(default, sources=_parse_sources(data["sources"], f"{path}.sources"))

    updates: Dict[str, Any] = {}
    if "pair_mode" in data:
        updates["pair_mode"] = bool(data["pair_mode"])
    for key in ("v0_mode", "rho_mode", "s0_sampling"):
        if key in data:
            updates[key] = str(data[key])
    for key in ("v0", "rho"):
        if key in data:
            updates[key] = _vector(data[key], f"{path}.{key}")
    if "active_dims" in data:
        dims = data["active_dims"]
        if not isinstance(dims, list) or not dims:
            _fail(f"{path}.active_dims", "expected a non-empty list of axes")
        updates["active_dims"] = tuple(int(d) for d in dims)
    if "polarization" in data:
        updates["polarization"] = _parse_polarization(data["polarization"], f"{path}.polarization", ensemble.polarization)
    return replace(ensemble, **updates)


def _parse_field(data, path: str, default: FieldSpec) -> FieldSpec:
    data = _mapping(data, path)
    region = default.region
    if "region" in data:
        raw = data["region"]
        if not isinstance(raw, list) or len(raw) != 2:
            _fail(f"{path}.region", "expected [start, stop] with stop null for an open region")
        region = (int(raw[0]), None if raw[1] is None else int(raw[1]))
    return replace(
        default,
        direction=_vector(data["direction"], f"{path}.direction") if "direction" in data else default.direction,
        gradient=_vector(data["gradient"], f"{path}.gradient") if "gradient" in data else default.gradient,
        b_m=_number(data, "b_m", f"{path}.", default.b_m),
        b_f=_number(data, "b_f", f"{path}.", default.b_f),
        density=_number(data, "density", f"{path}.", default.density),
        region=region,
    )


def _parse_arrival(data, path: str, default: ArrivalModel) -> ArrivalModel:
    data = _mapping(data, path)
    return replace(
        default,
        m2=_number(data, "m2", f"{path}.", default.m2),
        distance=_number(data, "distance", f"{path}.", default.distance),
        mu_b=_number(data, "mu_b", f"{path}.", default.mu_b),
        n_r=_number(data, "n_r", f"{path}.", default.n_r, int),
        window=_number(data, "window", f"{path}.", default.window),
        emit_spacing=_number(data, "emit_spacing", f"{path}.", default.emit_spacing),
        herald_window=(
            None
            if "herald_window" in data and data["herald_window"] is None
            else _number(data, "herald_window", f"{path}.", default.herald_window)
        ),
        correction=str(data.get("correction", default.correction)),
    )


def _parse_pairs(value, path: str) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    if not isinstance(value, list) or len(value) != 2:
        _fail(path, "expected two pairs of numbers")
    return tuple(_vector(item, f"{path}[{i}]", 2) for i, item in enumerate(value))


def scenario_from_dict(data: Mapping[str, Any], overrides: Optional[Mapping[str, Any]] = None) -> ScenarioConfig:
    data = _mapping(data, "")
    kind = data.get("kind")
    if kind not in KINDS:
        _fail("kind", f"expected one of {', '.join(KINDS)}, got {kind!r}")
    base = default_scenario(kind)
    known = {f.name for f in dataclasses.fields(ScenarioConfig)} | {"field"}
    for key in data:
        if key not in known or key == "magnet":
            _fail(str(key), "unknown field")

    ensemble = _parse_ensemble(data["ensemble"], "ensemble", base.ensemble) if "ensemble" in data else base.ensemble
    chi0 = _parse_pairs(data["chi0"], "chi0") if data.get("chi0") is not None else base.chi0
    if data.get("chi0") is not None:
        spinor = np.array([complex(re, im) for re, im in chi0])
        if not np.any(spinor):
            _fail("chi0", "spinor must be non-zero")
        direction = tuple(float(v) for v in polarization_from_spinor(spinor))
        ensemble = replace(ensemble, polarization=replace(ensemble.polarization, mode="fixed", direction=direction))

    magnet = _parse_field(data["field"], "field", base.magnet) if "field" in data else base.magnet
    mu_m = _number(data, "mu_m", "", base.mu_m)
    arrival_data = _mapping(data.get("arrival", {}), "arrival")
    arrival = _parse_arrival(arrival_data, "arrival", base.arrival)
    if "mu_b" not in arrival_data and kind == "bell":
        arrival = replace(arrival, mu_b=mu_m * magnet.b_m)

    values: Dict[str, Any] = dict(
        seed=_number(data, "seed", "", base.seed, int),
        n_p=_number(data, "n_p", "", base.n_p, int),
        spin=_number(data, "spin", "", base.spin),
        mode=str(data.get("mode", base.mode)),
        ensemble=ensemble,
        magnet=magnet,
        angles=_parse_angles(data["angles"]) if "angles" in data else base.angles,
        plane=_vector(data["plane"], "plane", 2, int) if "plane" in data else base.plane,
        mu_m=mu_m,
        eta=_number(data, "eta", "", base.eta),
        renormalize=bool(data.get("renormalize", base.renormalize)),
        steps=_number(data, "steps", "", base.steps, int),
        n_train=_number(data, "n_train", "", base.n_train, int),
        persistence_steps=_number(data, "persistence_steps", "", base.persistence_steps, int),
        chi0=chi0,
        arrival=arrival,
        chsh=_parse_pairs(data["chsh"], "chsh") if data.get("chsh") is not None else (None if "chsh" in data else base.chsh),
        filter_tau=_number(data, "filter_tau", "", base.filter_tau),
        threads=_number(data, "threads", "", base.threads, int),
        out_dir=data.get("out_dir", base.out_dir),
    )
    for key, value in (overrides or {}).items():
        if key not in OVERRIDABLE:
            _fail(key, "cannot be overridden")
        if value is not None:
            values[key] = value
    return ScenarioConfig(kind=kind, **values).validate()


def load_scenario(source: Union[str, Mapping[str, Any]], overrides: Optional[Mapping[str, Any]] = None) -> ScenarioConfig:
    """Read a scenario file (or an already parsed mapping) into a validated config.

    Raises :class:`ConfigError` for malformed content and lets ``OSError``
    through when the file cannot be read.
    """
    if isinstance(source, Mapping):
        return scenario_from_dict(source, overrides)
    with open(source, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"{source}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    return scenario_from_dict(data, overrides)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""


@dataclass
class RunReport:
    kind: str
    mode: str
    config: Dict[str, Any]
    settings: pd.DataFrame
    tables: Dict[str, pd.DataFrame]
    summary: Dict[str, Any]
    counters: Dict[str, int]
    provenance: Dict[str, Any]
    checks: List[CheckResult] = dataclasses.field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def document(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "mode": self.mode,
            "summary": self.summary,
            "counters": self.counters,
            "provenance": self.provenance,
            "checks": [dataclasses.asdict(check) for check in self.checks],
            "passed": self.passed,
        }


def _provenance(cfg: ScenarioConfig) -> Dict[str, Any]:
    return {"seed": cfg.seed, "config_hash": config_hash(cfg.echo()), "code_version": CODE_VERSION}


# ---------------------------------------------------------------------------
# Helpers shared by the engines
# ---------------------------------------------------------------------------


def _joint_counts(first: np.ndarray, second: np.ndarray, values: Tuple[int, ...]) -> np.ndarray:
    counts = np.zeros((len(values), len(values)), dtype=np.int64)
    for a, va in enumerate(values):
        for b, vb in enumerate(values):
            counts[a, b] = np.count_nonzero((first == va) & (second == vb))
    return counts


def _plane_angle(vec: np.ndarray, plane: Tuple[int, int]) -> float:
    return math.atan2(float(vec[plane[1]]), float(vec[plane[0]]))


def _sample_spin1_along(s0, mu: np.ndarray, tau: np.ndarray, lam: np.ndarray) -> np.ndarray:
    m = mu @ lam
    along = tau @ lam
    v = (np.sum(tau * tau, axis=1) - along**2) / 2.0
    return np.rint(sample_spin1(s0, m, np.maximum(v, 0.0))).astype(np.int64)


def _smoothed(values: np.ndarray) -> np.ndarray:
    return pd.Series(values).rolling(3, center=True, min_periods=1).mean().to_numpy()


def fringe_comparison(grid: np.ndarray, frequency: np.ndarray, reference: np.ndarray, tolerance: int = 1) -> Dict[str, Any]:
    """Match the interference maxima of an empirical histogram against a reference density."""
    if not len(reference) or reference.max() <= 0.0:
        return {"reference_maxima": [], "matched": False, "max_offset": math.inf, "contrast": 0.0}
    ref_max, _ = find_peaks(reference)
    ref_max = ref_max[reference[ref_max] >= 0.1 * reference.max()]
    ref_min, _ = find_peaks(-reference)
    if len(ref_max):
        ref_min = ref_min[(ref_min > ref_max.min()) & (ref_min < ref_max.max())]

    smoothed = _smoothed(frequency)
    emp_max = np.array([], dtype=np.int64)
    if smoothed.max() > 0.0:
        emp_max, _ = find_peaks(smoothed, prominence=0.1 * smoothed.max())
    offsets = [float(np.min(np.abs(grid[emp_max] - grid[i]))) if len(emp_max) else math.inf for i in ref_max]
    max_offset = max(offsets) if offsets else math.inf

    high = float(smoothed[ref_max].mean()) if len(ref_max) else 0.0
    low = float(smoothed[ref_min].mean()) if len(ref_min) else 0.0
    contrast = (high - low) / (high + low) if high + low > 0.0 else 0.0
    return {
        "reference_maxima": [int(grid[i]) for i in ref_max],
        "empirical_maxima": [int(grid[i]) for i in emp_max],
        "matched": bool(len(ref_max)) and max_offset <= tolerance,
        "max_offset": max_offset,
        "contrast": contrast,
    }


# ---------------------------------------------------------------------------
# Coincidence counting
# ---------------------------------------------------------------------------


@dataclass
class CoincidenceResult:
    matches: pd.DataFrame
    orphans_first: int
    orphans_second: int

    @property
    def arrivals(self) -> int:
        return 2 * len(self.matches) + self.orphans_first + self.orphans_second

    @property
    def accepted_fraction(self) -> float:
        return 2.0 * len(self.matches) / self.arrivals if self.arrivals else 0.0

    @property
    def orphan_fraction(self) -> float:
        return (self.orphans_first + self.orphans_second) / self.arrivals if self.arrivals else 0.0

    def records(self) -> List[CoincidenceRecord]:
        return [
            CoincidenceRecord(
                pair_first=int(row.pair_first),
                pair_second=int(row.pair_second),
                spin_first=int(row.spin_first),
                spin_second=int(row.spin_second),
                time_first=float(row.time_first),
                time_second=float(row.time_second),
                gap=float(row.gap),
            )
            for row in self.matches.itertuples(index=False)
        ]


def arrivals_frame(records: Iterable[ArrivalRecord]) -> pd.DataFrame:
    rows = [(r.pair_id, r.spin, r.time, r.m0) for r in records]
    return pd.DataFrame(rows, columns=["pair_id", "spin", "time", "m0"])


def station_shift(model: ArrivalModel, spins_first: np.ndarray, m0_first: np.ndarray, spin_second: int) -> np.ndarray:
    """Delay removed from station-I times when pairing them with station-II spin ``spin_second``."""
    spins_first = np.asarray(spins_first, dtype=float)
    other = np.full(spins_first.shape, float(spin_second))
    if model.correction == "off":
        return np.zeros(spins_first.shape)
    if model.correction == "first_order":
        return np.asarray(delta_T_correction(model.t0, model.mu_b, model.m2, spins_first, other), dtype=float)
    own, _ = arrival_times(model, spins_first, m0_first)
    paired, _ = arrival_times(model, other, m0_first)
    return own - paired


def count_coincidences(
    first: Union[pd.DataFrame, Iterable[ArrivalRecord]],
    second: Union[pd.DataFrame, Iterable[ArrivalRecord]],
    window: float,
    model: ArrivalModel,
) -> CoincidenceResult:
    """Greedy nearest-time pairing of station-I and station-II arrivals.

    Candidate pairs are those with ``|T_I - shift - T_II| <= window``; they are
    accepted in order of increasing gap (ties by station-I then station-II
    position in time order) and every arrival is used at most once. When both
    frames carry a ``branch`` column (see :func:`herald_branch`) only arrivals
    heralded on agreeing branches are paired.
    """
    first = first if isinstance(first, pd.DataFrame) else arrivals_frame(first)
    second = second if isinstance(second, pd.DataFrame) else arrivals_frame(second)
    first = first.sort_values(["time", "pair_id"], kind="mergesort").reset_index(drop=True)
    second = second.sort_values(["time", "pair_id"], kind="mergesort").reset_index(drop=True)
    times_first = first["time"].to_numpy(dtype=float)
    spins_first = first["spin"].to_numpy(dtype=float)
    m0_first = first["m0"].to_numpy(dtype=float)
    times_all = second["time"].to_numpy(dtype=float)
    spins_all = second["spin"].to_numpy()
    heralded = "branch" in first.columns and "branch" in second.columns
    if heralded:
        branch_first = first["branch"].to_numpy()
        branch_all = second["branch"].to_numpy()

    edge_i, edge_j, edge_gap = [], [], []
    for spin_second in SPIN_HALF_VALUES:
        candidates = np.flatnonzero(spins_all == spin_second)
        if not len(candidates) or not len(first):
            continue
        times_second = times_all[candidates]
        corrected = times_first - station_shift(model, spins_first, m0_first, spin_second)
        lo = np.searchsorted(times_second, corrected - window, side="left")
        hi = np.searchsorted(times_second, corrected + window, side="right")
        width = np.where(np.isnan(corrected), 0, hi - lo)
        i = np.repeat(np.arange(len(first)), width)
        offsets = np.arange(int(width.sum())) - np.repeat(np.cumsum(width) - width, width)
        j = np.repeat(lo, width) + offsets
        gap = corrected[i] - times_second[j]
        keep = np.abs(gap) <= window
        if heralded:
            keep &= branches_agree(branch_first[i], branch_all[candidates[j]])
        edge_i.append(i[keep])
        edge_j.append(candidates[j[keep]])
        edge_gap.append(gap[keep])

    i = np.concatenate(edge_i) if edge_i else np.array([], dtype=np.int64)
    j = np.concatenate(edge_j) if edge_j else np.array([], dtype=np.int64)
    gap = np.concatenate(edge_gap) if edge_gap else np.array([], dtype=float)
    used_first = np.zeros(len(first), dtype=bool)
    used_second = np.zeros(len(second), dtype=bool)
    accepted = []
    for e in np.lexsort((j, i, np.abs(gap))):
        a, b = i[e], j[e]
        if used_first[a] or used_second[b]:
            continue
        used_first[a] = used_second[b] = True
        accepted.append(e)
    accepted = np.array(accepted, dtype=np.int64)

    ai, bj = i[accepted], j[accepted]
    matches = pd.DataFrame(
        {
            "pair_first": first["pair_id"].to_numpy()[ai].astype(np.int64),
            "pair_second": second["pair_id"].to_numpy()[bj].astype(np.int64),
            "spin_first": spins_first[ai].astype(np.int64),
            "spin_second": spins_all[bj].astype(np.int64),
            "time_first": times_first[ai],
            "time_second": times_all[bj],
            "gap": gap[accepted],
        },
        columns=COINCIDENCE_COLUMNS,
    )
    matches = matches.sort_values(["time_first", "pair_first"], kind="mergesort").reset_index(drop=True)
    return CoincidenceResult(
        matches=matches,
        orphans_first=int(len(first) - len(matches)),
        orphans_second=int(len(second) - len(matches)),
    )


ARRIVAL_COLUMNS = ["setting", "pair_id", "station", "spin", "T_raw", "T_corrected", "M0", "branch", "matched"]


def arrival_log(setting: int, first: pd.DataFrame, second: pd.DataFrame, matches: pd.DataFrame) -> pd.DataFrame:
    """Every detection of a setting, matched or orphaned, in pair order per station.

    ``T_corrected`` is the shifted station-I time a match was paired on; it
    equals ``T_raw`` at station II and is NaN for unmatched station-I arrivals.
    """
    frames = []
    for name, frame, key in (("I", first, "pair_first"), ("II", second, "pair_second")):
        matched = frame["pair_id"].isin(matches[key])
        if name == "I":
            corrected = frame["pair_id"].map(
                pd.Series((matches["time_second"] + matches["gap"]).to_numpy(), index=matches["pair_first"].to_numpy())
            )
        else:
            corrected = frame["time"]
        frames.append(
            pd.DataFrame(
                {
                    "setting": setting,
                    "pair_id": frame["pair_id"].to_numpy(),
                    "station": name,
                    "spin": frame["spin"].to_numpy(),
                    "T_raw": frame["time"].to_numpy(),
                    "T_corrected": corrected.to_numpy(dtype=float),
                    "M0": frame["m0"].to_numpy(),
                    "branch": frame["branch"].to_numpy() if "branch" in frame else 0,
                    "matched": matched.to_numpy(),
                },
                columns=ARRIVAL_COLUMNS,
            ).sort_values("pair_id", kind="mergesort")
        )
    return pd.concat(frames, ignore_index=True)


def _spin_combinations(mt_first: np.ndarray, mt_second: np.ndarray) -> Iterator[Tuple[int, int, np.ndarray]]:
    """Probability of each spin pair for a source spin uniform on [-1, 1)."""
    yield 1, 1, np.maximum(0.0, np.minimum(1.0, mt_second) - np.maximum(-1.0, -mt_first)) / 2.0
    yield 1, -1, np.maximum(0.0, 1.0 - np.maximum(-mt_first, mt_second)) / 2.0
    yield -1, 1, np.maximum(0.0, np.minimum(-mt_first, mt_second) + 1.0) / 2.0
    yield -1, -1, np.maximum(0.0, -mt_first - mt_second) / 2.0


def expected_acceptance(directions: np.ndarray, lam_first, lam_second, model: ArrivalModel) -> np.ndarray:
    """Chance that a pair emitted along each direction is counted as a coincidence (expected arrivals)."""
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    mt_first = np.atleast_1d(tilde_M(directions @ np.asarray(lam_first, dtype=float), model.n_r))
    mt_second = np.atleast_1d(tilde_M(-(directions @ np.asarray(lam_second, dtype=float)), model.n_r))
    (m_hat, _), _ = coincidence_M0(lam_first, lam_second)
    acceptance = np.zeros(len(directions))
    for s_first, s_second, weight in _spin_combinations(mt_first, mt_second):
        spins_first = np.full(len(directions), float(s_first))
        spins_second = np.full(len(directions), float(s_second))
        t_first, ok_first = arrival_times(model, spins_first, mt_first)
        t_second, ok_second = arrival_times(model, spins_second, mt_second)
        agree = branches_agree(
            herald_branch(model, spins_first, t_first, m_hat), herald_branch(model, spins_second, t_second, m_hat)
        )
        gap = t_first - station_shift(model, spins_first, mt_first, s_second) - t_second
        hit = ok_first & ok_second & agree & (np.abs(np.nan_to_num(gap, nan=np.inf)) <= model.coincidence_window)
        acceptance += np.where(hit, weight, 0.0)
    return acceptance


def near_bisector(index: np.ndarray, n_mu: int) -> np.ndarray:
    index = np.asarray(index) % n_mu
    to_plus = np.minimum(index, n_mu - index)
    opposite = np.abs(index - n_mu / 2.0)
    to_minus = np.minimum(opposite, n_mu - opposite)
    return (to_plus <= 1) | (to_minus <= 1)


# ---------------------------------------------------------------------------
# Reference tables
# ---------------------------------------------------------------------------


def second_stage(cfg: ScenarioConfig, angle: float) -> FieldSpec:
    base = _plane_angle(cfg.magnet.lam, cfg.plane)
    return cfg.magnet.rotated(base + angle, cfg.plane)


def bell_settings(cfg: ScenarioConfig) -> List[Tuple[str, float, float]]:
    """``(label, angle_first, angle_second)``; the sweep keeps station II at angle 0."""
    settings = [("sweep", float(a), 0.0) for a in cfg.angles]
    if cfg.chsh is not None:
        (a1, a2), (b1, b2) = cfg.chsh
        settings += [("chsh", float(a), float(b)) for a in (a1, a2) for b in (b1, b2)]
    return settings


def bell_geometry(cfg: ScenarioConfig, angle_first: float, angle_second: float):
    lam_first = plane_vector(angle_first, cfg.plane)
    lam_second = plane_vector(angle_second, cfg.plane)
    _, bisector = coincidence_M0(lam_first, lam_second, cfg.plane)
    polarization = replace(cfg.ensemble.polarization, offset=_plane_angle(bisector, cfg.plane))
    return lam_first, lam_second, replace(cfg.ensemble, polarization=polarization)


def sg_references(cfg: ScenarioConfig) -> pd.DataFrame:
    ens, magnet = cfg.ensemble, cfg.magnet
    axis = ens.active_dims[0]
    chi0 = cfg.spinor if cfg.spinor is not None else spinor_from_polarization(ens.polarization.direction)
    phi = -cfg.mu_m * magnet.b_f * float(magnet.nu[axis])
    spinor_field = sg_propagate(packet_from_ensemble(ens, chi0, axis), cfg.steps, phi, axis)
    rho, s3 = densities_from_spinor(spinor_field)

    points = np.tile(ensemble_centre(ens), (len(spinor_field.grid), 1))
    points[:, axis] = spinor_field.grid
    p_up, _ = analytic_spin_pmf(ens.polarization.direction, magnet.lam)
    model = np.zeros(len(points))
    for s, weight in ((1, p_up), (-1, 1.0 - p_up)):
        coeffs = KinematicCoeffs.free_fall(-cfg.mu_m * magnet.b_f * s * magnet.nu)
        model += weight * position_pdf(points, cfg.steps, ens, coeffs)
    return pd.DataFrame(
        {"x": spinor_field.grid.astype(np.int64), "oracle_density": rho, "oracle_s3": s3, "model_density": model}
    )


def walk_reference(cfg: ScenarioConfig) -> pd.DataFrame:
    ens = cfg.ensemble
    axis = ens.active_dims[0]
    centre = ensemble_centre(ens)
    sources = ens.positions[:, axis]
    grid = np.arange(int(sources.min()) - cfg.steps - 1, int(sources.max()) + cfg.steps + 2)
    points = np.tile(centre, (len(grid), 1))
    points[:, axis] = grid
    return pd.DataFrame({"x": grid, "reference": position_pdf(points, cfg.steps, ens, KinematicCoeffs.free())})


def reference_tables(cfg: ScenarioConfig) -> Dict[str, pd.DataFrame]:
    cfg = cfg.validate()
    if cfg.kind == "homogeneous":
        mu0 = cfg.ensemble.polarization.direction
        rows = [(a, *analytic_spin_pmf(mu0, cfg.magnet.rotated(a, cfg.plane).lam)) for a in cfg.angles]
        return {"spin_pmf": pd.DataFrame(rows, columns=["angle", "ref_up", "ref_down"])}
    if cfg.kind == "sg_single":
        return {"profile": sg_references(cfg)}
    if cfg.kind == "sg_cascade":
        rows = []
        for a in cfg.angles:
            lam2 = second_stage(cfg, a).lam
            for s1 in SPIN_HALF_VALUES:
                pmf = cascade_pmf(cfg.magnet.lam, lam2, s1)
                rows += [(a, s1, s2, p) for s2, p in zip(SPIN_HALF_VALUES, pmf)]
        return {"cascade": pd.DataFrame(rows, columns=["angle", "s1", "s2", "reference"])}
    if cfg.kind == "spin1_cascade":
        rows = []
        for a in cfg.angles:
            y = math.cos(a)
            for s1 in SPIN_ONE_VALUES:
                moment, wigner = spin1_cascade_pmf(y, s1), wigner_reference(1.0, y, s1)
                rows += [(y, s1, s2, moment[k], wigner[k]) for k, s2 in enumerate(SPIN_ONE_VALUES)]
        return {"cascade": pd.DataFrame(rows, columns=["y", "s1", "s2", "reference", "wigner"])}
    if cfg.kind == "bell":
        curves, grid_rows = [], []
        for k, (label, a, b) in enumerate(bell_settings(cfg)):
            lam_first, lam_second, ens = bell_geometry(cfg, a, b)
            pmf = joint_pmf(lam_first, lam_second)
            curves.append((label, a - b, pmf[(1, 1)], pmf[(1, -1)], correlation(pmf)))
            acceptance = expected_acceptance(ens.polarization.grid_directions(), lam_first, lam_second, cfg.arrival)
            grid_rows += [(k, g, acceptance[g]) for g in range(len(acceptance))]
        return {
            "joint_reference": pd.DataFrame(curves, columns=["label", "angle", "ref_same", "ref_opp", "ref_correlation"]),
            "grid_acceptance": pd.DataFrame(grid_rows, columns=["setting", "grid_index", "expected_acceptance"]),
        }
    return {"walk": walk_reference(cfg)}


def reference_report(cfg: ScenarioConfig) -> RunReport:
    tables = reference_tables(cfg)
    return RunReport(
        kind=cfg.kind,
        mode=cfg.mode,
        config=cfg.echo(),
        settings=pd.DataFrame(),
        tables=tables,
        summary={"reference_only": True},
        counters={},
        provenance=_provenance(cfg),
    )


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------


class ScenarioRunner:
    """Runs one scenario. Each kind has a ``_run_<kind>`` engine returning the settings table."""

    def __init__(self, cfg: ScenarioConfig) -> None:
        self.cfg = cfg.validate()
        self.tables: Dict[str, pd.DataFrame] = {}
        self.summary: Dict[str, Any] = {}
        self.counters: Counter = Counter()

    def run(self) -> RunReport:
        cfg = self.cfg
        logger.info(
            "Running %s scenario (%s, seed=%d, N_p=%d, threads=%d)", cfg.kind, cfg.mode, cfg.seed, cfg.n_p, cfg.threads
        )
        settings = getattr(self, f"_run_{cfg.kind}")()
        return RunReport(
            kind=cfg.kind,
            mode=cfg.mode,
            config=cfg.echo(),
            settings=settings,
            tables=dict(sorted(self.tables.items())),
            summary=self.summary,
            counters={key: int(value) for key, value in sorted(self.counters.items())},
            provenance=_provenance(cfg),
        )

    def _map_blocks(self, task: Callable[[np.random.Generator, int, int], Any], count: int, replica: int) -> List[Any]:
        blocks = block_ranges(count)

        def run_block(block: Tuple[int, int, int]) -> Any:
            block_id, start, stop = block
            return task(RngStream(self.cfg.seed, replica, block_id).generator(), start, stop)

        if self.cfg.threads == 1 or len(blocks) < 2:
            return [run_block(b) for b in blocks]
        with ThreadPoolExecutor(max_workers=self.cfg.threads) as pool:
            return list(pool.map(run_block, blocks))

    # -- homogeneous field ---------------------------------------------------

    def _homogeneous_block(self, magnet: FieldSpec, gen: np.random.Generator, start: int, stop: int):
        cfg = self.cfg
        count = stop - start
        if cfg.mode == "microscopic":
            spins = []
            for _ in range(count):
                particle = prepare_emission(cfg.ensemble, cfg.spin, gen)
                state = SpinHalfState(particle.mu, particle.s0, mu_m=cfg.mu_m, eta=cfg.eta)
                state.precess(magnet, magnet.region[0], cfg.renormalize)
                spins.append(state.measure(magnet))
            spins = np.array(spins)
        else:
            emission = prepare_block(cfg.ensemble, cfg.spin, gen, count)
            spins = sample_spin(emission.s0, emission.mu @ magnet.lam)
        return int(np.count_nonzero(spins == 1)), count

    def _run_homogeneous(self) -> pd.DataFrame:
        cfg = self.cfg
        mu0 = cfg.ensemble.polarization.direction
        rows = []
        for k, angle in enumerate(cfg.angles):
            magnet = cfg.magnet.rotated(angle, cfg.plane)
            parts = self._map_blocks(partial(self._homogeneous_block, magnet), cfg.n_p, k)
            up = sum(p[0] for p in parts)
            n = sum(p[1] for p in parts)
            ref_up, ref_down = analytic_spin_pmf(mu0, magnet.lam)
            p_up = up / n if n else math.nan
            rows.append(
                {
                    "setting": k,
                    "angle": angle,
                    "n": n,
                    "p_up": p_up,
                    "p_down": 1.0 - p_up if n else math.nan,
                    "ref_up": ref_up,
                    "ref_down": ref_down,
                    "deviation": abs(p_up - ref_up) if n else math.nan,
                }
            )
        settings = pd.DataFrame(rows)
        self.tables["spin_pmf"] = settings[["angle", "p_up", "p_down", "ref_up", "ref_down"]]
        self.summary["max_deviation"] = float(settings["deviation"].max()) if cfg.n_p else math.nan
        return settings

    # -- single Stern-Gerlach ------------------------------------------------

    def _sg_block(self, gen: np.random.Generator, start: int, stop: int):
        cfg = self.cfg
        ens, magnet = cfg.ensemble, cfg.magnet
        axis = ens.active_dims[0]
        count = stop - start
        emission = prepare_block(ens, cfg.spin, gen, count)
        m = emission.mu @ magnet.lam
        spins = sample_spin(emission.s0, m)

        # Energy jump of the spin reset paid from the momentum propensity
        jump = cfg.mu_m * magnet.b_m * (spins - m)
        norm_sq = np.sum(emission.v0**2, axis=1)
        allowed = (jump == 0.0) | ((norm_sq > 0.0) & (norm_sq - jump >= 0.0))
        alpha = np.ones(count)
        paying = allowed & (jump != 0.0)
        alpha[paying] = np.sqrt((norm_sq[paying] - jump[paying]) / norm_sq[paying])
        along = emission.v0 @ magnet.nu
        v0 = alpha[:, None] * emission.v0 + (1.0 - alpha)[:, None] * np.outer(along, magnet.nu)

        positions = np.zeros(count)
        for s in SPIN_HALF_VALUES:
            mask = allowed & (spins == s)
            if np.any(mask):
                coeffs = KinematicCoeffs.free_fall(-cfg.mu_m * magnet.b_f * s * magnet.nu)
                positions[mask] = transport_positions(v0[mask], cfg.steps, ens, ens.rho, coeffs)[:, axis]
        flips, trials = persistence_flips(spins[allowed], magnet, cfg.eta, cfg.persistence_steps, gen, cfg.renormalize)
        return np.rint(positions[allowed]).astype(np.int64), spins[allowed], int(np.count_nonzero(~allowed)), flips, trials

    def _sg_microscopic(self) -> Tuple[np.ndarray, np.ndarray]:
        cfg = self.cfg
        ens = cfg.ensemble
        axis = ens.active_dims[0]
        force_field = MagneticForceField(cfg.magnet, cfg.mu_m, cfg.eta)
        scenario = WalkScenario(ens, cfg.steps, cfg.n_train, ens.active_dims, cfg.spin)
        walker = LatticeWalker(scenario, cfg.seed, force_field=force_field)
        walker.train(cfg.n_train)
        positions, spins = [], []
        for particle in walker.finals(cfg.n_p):
            if particle is not None:
                positions.append(int(particle.position[axis]))
                spins.append(int(particle.s))
        self.counters["forbidden_resets"] += force_field.forbidden
        self.counters["overflows"] += walker.overflows
        self.counters["spin_flips"] += force_field.flips
        self.counters["persistence_trials"] += force_field.trials
        return np.array(positions, dtype=np.int64), np.array(spins, dtype=np.int64)

    def _run_sg_single(self) -> pd.DataFrame:
        cfg = self.cfg
        if cfg.mode == "microscopic":
            positions, spins = self._sg_microscopic()
        else:
            parts = self._map_blocks(self._sg_block, cfg.n_p, 0)
            positions = np.concatenate([p[0] for p in parts]) if parts else np.array([], dtype=np.int64)
            spins = np.concatenate([p[1] for p in parts]) if parts else np.array([], dtype=np.int64)
            self.counters["forbidden_resets"] += sum(p[2] for p in parts)
            self.counters["spin_flips"] += sum(p[3] for p in parts)
            self.counters["persistence_trials"] += sum(p[4] for p in parts)
        if self.counters["forbidden_resets"]:
            logger.warning("%d spin resets were energetically forbidden", self.counters["forbidden_resets"])

        profile = sg_references(cfg)
        grid = profile["x"].to_numpy()
        index = positions - grid[0]
        inside = (index >= 0) & (index < len(grid))
        self.counters["outside_grid"] += int(np.count_nonzero(~inside))
        up = np.bincount(index[inside & (spins == 1)], minlength=len(grid))
        down = np.bincount(index[inside & (spins == -1)], minlength=len(grid))
        n = len(positions)
        profile.insert(1, "count_up", up)
        profile.insert(2, "count_down", down)
        profile.insert(3, "density", (up + down) / n if n else np.zeros(len(grid)))
        profile.insert(4, "s3", (up - down) / n if n else np.zeros(len(grid)))
        self.tables["profile"] = profile

        p_up_ref, _ = analytic_spin_pmf(cfg.ensemble.polarization.direction, cfg.magnet.lam)
        row: Dict[str, Any] = {
            "setting": 0,
            "angle": 0.0,
            "n": n,
            "p_up": float(np.mean(spins == 1)) if n else math.nan,
            "ref_up": p_up_ref,
        }
        if n:
            oracle = compare_distributions(up + down, profile["oracle_density"].to_numpy())
            model = compare_distributions(up + down, profile["model_density"].to_numpy())
            row.update({f"{key}_oracle": value for key, value in oracle.items()})
            row.update({f"{key}_model": value for key, value in model.items()})
            self.summary.update(self._spin_density_shape(profile))
        self.summary.update({k: v for k, v in row.items() if k not in ("setting", "angle")})
        self.summary["spin_flips"] = int(self.counters["spin_flips"])
        return pd.DataFrame([row])

    @staticmethod
    def _spin_density_shape(profile: pd.DataFrame) -> Dict[str, Any]:
        grid = profile["x"].to_numpy()
        s3 = _smoothed(profile["s3"].to_numpy())
        oracle_s3 = profile["oracle_s3"].to_numpy()
        centre = float(np.sum(grid * profile["density"].to_numpy()))
        left = float(profile["s3"][grid < centre].sum())
        right = float(profile["s3"][grid > centre].sum())
        emp_max, emp_min = int(grid[np.argmax(s3)]), int(grid[np.argmin(s3)])
        ref_max, ref_min = int(grid[np.argmax(oracle_s3)]), int(grid[np.argmin(oracle_s3)])
        return {
            "beam_centre": centre,
            "s3_left": left,
            "s3_right": right,
            "s3_sign_change": left * right < 0.0,
            "s3_extrema_opposite": (emp_max - centre) * (emp_min - centre) < 0.0,
            "s3_max_x": emp_max,
            "s3_min_x": emp_min,
            "oracle_s3_max_x": ref_max,
            "oracle_s3_min_x": ref_min,
            "s3_extrema_offset": max(abs(emp_max - ref_max), abs(emp_min - ref_min)),
        }

    # -- cascades ------------------------------------------------------------

    def _cascade_particle(self, gen: np.random.Generator, second: FieldSpec) -> Optional[Tuple[int, int]]:
        cfg = self.cfg
        particle = prepare_emission(cfg.ensemble, cfg.spin, gen)
        particle.s = sample_spin(particle.s0, float(np.dot(particle.mu, cfg.magnet.lam)))
        try:
            spin_external_reset(particle, cfg.magnet, cfg.mu_m, gen=gen)
        except ForbiddenResetError:
            return None
        state = SpinHalfState(particle.mu, particle.s0, s=particle.s, mu_m=cfg.mu_m, eta=cfg.eta)
        state.precess(second, second.region[0], cfg.renormalize)
        return int(particle.s), state.measure(second)

    def _cascade_block(self, second: FieldSpec, gen: np.random.Generator, start: int, stop: int):
        cfg = self.cfg
        count = stop - start
        first = cfg.magnet.lam
        if cfg.mode == "microscopic":
            outcomes = [self._cascade_particle(gen, second) for _ in range(count)]
            kept = [o for o in outcomes if o is not None]
            s1 = np.array([o[0] for o in kept], dtype=np.int64)
            s2 = np.array([o[1] for o in kept], dtype=np.int64)
            return _joint_counts(s1, s2, SPIN_HALF_VALUES), count - len(kept)
        emission = prepare_block(cfg.ensemble, cfg.spin, gen, count)
        s1 = sample_spin(emission.s0, emission.mu @ first)
        s0 = gen.uniform(-1.0, 1.0, size=count)
        s2 = sample_spin(s0, (s1[:, None] * first[None, :]) @ second.lam)
        return _joint_counts(s1, s2, SPIN_HALF_VALUES), 0

    def _spin1_particle(self, gen: np.random.Generator, second: FieldSpec) -> Tuple[int, int]:
        cfg = self.cfg
        particle = prepare_emission(cfg.ensemble, cfg.spin, gen)
        state = HigherSpinState(particle.mu, particle.tau, particle.s0, spin_number=cfg.spin)
        s1 = sample_spin_general(cfg.spin, state.s0, spin1_pmf(*state.moments(cfg.magnet)))
        higher_er(state, cfg.magnet, s1)
        state.s0 = float(gen.uniform(-1.0, 1.0))
        s2 = sample_spin_general(cfg.spin, state.s0, spin1_pmf(*state.moments(second)))
        return int(round(s1)), int(round(s2))

    def _spin1_block(self, second: FieldSpec, gen: np.random.Generator, start: int, stop: int):
        cfg = self.cfg
        count = stop - start
        first = cfg.magnet.lam
        if cfg.mode == "microscopic":
            outcomes = [self._spin1_particle(gen, second) for _ in range(count)]
            s1 = np.array([o[0] for o in outcomes], dtype=np.int64)
            s2 = np.array([o[1] for o in outcomes], dtype=np.int64)
            return _joint_counts(s1, s2, SPIN_ONE_VALUES), 0
        emission = prepare_block(cfg.ensemble, cfg.spin, gen, count)
        s1 = _sample_spin1_along(emission.s0, emission.mu, emission.tau, first)
        mu = s1[:, None] * first[None, :]
        tau = np.sqrt(2.0 - s1**2)[:, None] * first[None, :]
        s0 = gen.uniform(-1.0, 1.0, size=count)
        s2 = _sample_spin1_along(s0, mu, tau, second.lam)
        return _joint_counts(s1, s2, SPIN_ONE_VALUES), 0

    def _cascade_tables(self, block: Callable, values: Tuple[int, ...], reference: Callable) -> pd.DataFrame:
        cfg = self.cfg
        rows, cells = [], []
        for k, angle in enumerate(cfg.angles):
            second = second_stage(cfg, angle)
            parts = self._map_blocks(partial(block, second), cfg.n_p, k)
            counts = sum((p[0] for p in parts), np.zeros((len(values), len(values)), dtype=np.int64))
            self.counters["forbidden_resets"] += sum(p[1] for p in parts)
            for a, s1 in enumerate(values):
                n = int(counts[a].sum())
                expected = reference(second, s1)
                frequency = counts[a] / n if n else np.full(len(values), math.nan)
                for b, s2 in enumerate(values):
                    cells.append(
                        {
                            "angle": angle,
                            "y": math.cos(angle),
                            "s1": s1,
                            "s2": s2,
                            "count": int(counts[a, b]),
                            "frequency": frequency[b],
                            **{key: float(vals[b]) for key, vals in expected.items()},
                        }
                    )
                deviation = float(np.max(np.abs(frequency - expected["reference"]))) if n else math.nan
                rows.append({"setting": k, "angle": angle, "s1": s1, "n": n, "deviation": deviation})
        self.tables["cascade"] = pd.DataFrame(cells)
        settings = pd.DataFrame(rows)
        self.summary["max_deviation"] = float(settings["deviation"].max()) if cfg.n_p else math.nan
        return settings

    def _run_sg_cascade(self) -> pd.DataFrame:
        first = self.cfg.magnet.lam

        def reference(second: FieldSpec, s1: int) -> Dict[str, np.ndarray]:
            return {"reference": np.array(cascade_pmf(first, second.lam, s1))}

        return self._cascade_tables(self._cascade_block, SPIN_HALF_VALUES, reference)

    def _run_spin1_cascade(self) -> pd.DataFrame:
        first = self.cfg.magnet.lam

        def reference(second: FieldSpec, s1: int) -> Dict[str, np.ndarray]:
            y = float(np.clip(np.dot(first, second.lam), -1.0, 1.0))
            moment = spin1_cascade_pmf(y, s1)
            return {"reference": moment, "wigner": wigner_reference(1.0, y, s1)}

        settings = self._cascade_tables(self._spin1_block, SPIN_ONE_VALUES, reference)
        cascade = self.tables["cascade"]
        self.summary["max_oracle_gap"] = float(np.max(np.abs(cascade["reference"] - cascade["wigner"])))
        return settings

    # -- Bell test -----------------------------------------------------------

    def _walk_arrivals(self, spins: np.ndarray, tilde_m0: np.ndarray, gen: np.random.Generator):
        model = self.cfg.arrival
        radicand = model.m2**2 - model.mu_b * (spins - tilde_m0)
        allowed = radicand > 0.0
        after = np.sqrt(np.where(allowed, radicand, model.m2**2))
        times = first_passage_times(
            model.m2, after, int(round(model.distance)), self.cfg.magnet.region[0], gen, int(3 * model.t0)
        )
        return times, allowed & np.isfinite(times)

    def _bell_block(self, ens: SourceEnsemble, lam_first, lam_second, gen: np.random.Generator, start: int, stop: int):
        cfg, model = self.cfg, self.cfg.arrival
        emission = prepare_block(ens, cfg.spin, gen, stop - start)
        m_first = emission.mu @ lam_first
        m_second = -(emission.mu @ lam_second)
        s_first, s_second = pair_spins(emission.s0, m_first, m_second, model.n_r)
        mt_first = np.atleast_1d(tilde_M(m_first, model.n_r))
        mt_second = np.atleast_1d(tilde_M(m_second, model.n_r))
        if cfg.mode == "microscopic":
            t_first, ok_first = self._walk_arrivals(s_first, mt_first, gen)
            t_second, ok_second = self._walk_arrivals(s_second, mt_second, gen)
        else:
            t_first, ok_first = arrival_times(model, s_first, mt_first)
            t_second, ok_second = arrival_times(model, s_second, mt_second)
        pair_id = np.arange(start, stop, dtype=np.int64)
        emitted = pair_id * model.spacing
        return {
            "pair_id": pair_id,
            "grid_index": emission.grid_index,
            "s_first": np.asarray(s_first, dtype=np.int64),
            "s_second": np.asarray(s_second, dtype=np.int64),
            "m_first": mt_first,
            "m_second": mt_second,
            "t_first": t_first + emitted,
            "t_second": t_second + emitted,
            "ok_first": ok_first,
            "ok_second": ok_second,
        }

    def _bell_setting(self, k: int, label: str, angle_first: float, angle_second: float):
        cfg, model = self.cfg, self.cfg.arrival
        lam_first, lam_second, ens = bell_geometry(cfg, angle_first, angle_second)
        n_mu = ens.polarization.n_mu
        blocks = self._map_blocks(partial(self._bell_block, ens, lam_first, lam_second), cfg.n_p, k)
        if blocks:
            pairs = {key: np.concatenate([b[key] for b in blocks]) for key in blocks[0]}
        else:
            pairs = {key: np.array([]) for key in ("pair_id", "grid_index", "s_first", "s_second")}
            pairs.update({key: np.array([], dtype=float) for key in ("m_first", "m_second", "t_first", "t_second")})
            pairs.update({key: np.array([], dtype=bool) for key in ("ok_first", "ok_second")})

        (m_hat, _), _ = coincidence_M0(lam_first, lam_second, cfg.plane)
        stations = {}
        for station in ("first", "second"):
            ok = pairs[f"ok_{station}"]
            pair_id = pairs["pair_id"][ok].astype(np.int64)
            spins = pairs[f"s_{station}"][ok].astype(np.int64)
            times = pairs[f"t_{station}"][ok]
            stations[station] = pd.DataFrame(
                {
                    "pair_id": pair_id,
                    "spin": spins,
                    "time": times,
                    "m0": pairs[f"m_{station}"][ok],
                    "branch": herald_branch(model, spins, times - pair_id * model.spacing, m_hat),
                }
            )
            self.counters["forbidden_arrivals"] += int(np.count_nonzero(~ok))
        result = count_coincidences(stations["first"], stations["second"], model.coincidence_window, model)
        matches = result.matches
        self.counters["coincidences"] += len(matches)
        self.counters["orphans"] += result.orphans_first + result.orphans_second

        n = len(matches)
        counts = {
            (a, b): int(np.count_nonzero((matches["spin_first"] == a) & (matches["spin_second"] == b)))
            for a in SPIN_HALF_VALUES
            for b in SPIN_HALF_VALUES
        }
        frequency = {key: value / n if n else math.nan for key, value in counts.items()}
        reference = joint_pmf(lam_first, lam_second)

        directions = ens.polarization.grid_directions()
        acceptance = expected_acceptance(directions, lam_first, lam_second, model)
        admitted = np.flatnonzero(acceptance > ACCEPTANCE_FLOOR)
        selective = bool(np.all(near_bisector(admitted, n_mu)))
        grid_of_match = pairs["grid_index"][matches["pair_first"].to_numpy()].astype(np.int64)
        emitted_grid = np.bincount(pairs["grid_index"].astype(np.int64), minlength=n_mu)
        matched_grid = np.bincount(grid_of_match, minlength=n_mu)

        row = {
            "setting": k,
            "label": label,
            "angle": angle_first - angle_second,
            "angle_first": angle_first,
            "angle_second": angle_second,
            "pairs": int(len(pairs["pair_id"])),
            "coincidences": n,
            "rho_pp": frequency[(1, 1)],
            "rho_mm": frequency[(-1, -1)],
            "rho_pm": frequency[(1, -1)],
            "rho_mp": frequency[(-1, 1)],
            "ref_same": reference[(1, 1)],
            "ref_opp": reference[(1, -1)],
            "correlation": correlation(frequency) if n else math.nan,
            "ref_correlation": correlation(reference),
            "marginal_first": float(np.mean(stations["first"]["spin"] == 1)) if len(stations["first"]) else math.nan,
            "marginal_second": float(np.mean(stations["second"]["spin"] == 1)) if len(stations["second"]) else math.nan,
            "accepted_fraction": result.accepted_fraction,
            "orphan_fraction": result.orphan_fraction,
            "near_bisector": float(np.mean(near_bisector(grid_of_match, n_mu))) if n else math.nan,
            "selective": selective,
        }
        logger.info(
            "Setting %d (%s, angle=%.4f): %d coincidences, accepted fraction %.4f%s",
            k,
            label,
            row["angle"],
            n,
            result.accepted_fraction,
            "" if selective else " (non-selective)",
        )

        grid_rows = pd.DataFrame(
            {
                "setting": k,
                "grid_index": np.arange(n_mu),
                "emitted": emitted_grid,
                "coincidences": matched_grid,
                "expected_acceptance": acceptance,
            }
        )
        return row, grid_rows, arrival_log(k, stations["first"], stations["second"], matches)

    def _run_bell(self) -> pd.DataFrame:
        cfg = self.cfg
        rows, grids, arrivals = [], [], []
        for k, (label, angle_first, angle_second) in enumerate(bell_settings(cfg)):
            row, grid_rows, sample = self._bell_setting(k, label, angle_first, angle_second)
            rows.append(row)
            grids.append(grid_rows)
            arrivals.append(sample)
        settings = pd.DataFrame(rows)
        if self.counters["forbidden_arrivals"]:
            logger.warning("%d arrivals were energetically forbidden", self.counters["forbidden_arrivals"])

        sweep = settings[settings["label"] == "sweep"]
        self.tables["coincidences"] = sweep[["angle", "rho_pp", "rho_mm", "rho_pm", "rho_mp", "ref_same", "ref_opp"]]
        self.tables["grid"] = pd.concat(grids, ignore_index=True)
        self.tables["arrivals"] = pd.concat(arrivals, ignore_index=True)

        emitted = self.tables["grid"].groupby("grid_index")["emitted"].sum().to_numpy()
        self.summary["grid_uniformity_p"] = float(chisquare(emitted).pvalue) if emitted.sum() else math.nan
        self.summary["accepted_fraction"] = float(settings["accepted_fraction"].mean())
        self.summary["non_selective_angles"] = [float(a) for a in sweep.loc[~sweep["selective"], "angle"]]
        self.summary["coincidence_window"] = cfg.arrival.coincidence_window

        chsh_rows = settings[settings["label"] == "chsh"]
        if len(chsh_rows) == 4:
            e = chsh_rows["correlation"].to_numpy()
            r = chsh_rows["ref_correlation"].to_numpy()
            self.summary["chsh"] = chsh_statistic(*e)
            self.summary["chsh_reference"] = chsh_statistic(*r)
            self.tables["chsh"] = chsh_rows[["angle_first", "angle_second", "correlation", "ref_correlation"]]
            logger.info("CHSH statistic %.4f (reference %.4f)", self.summary["chsh"], self.summary["chsh_reference"])
        return settings

    # -- interference walk ---------------------------------------------------

    def _walk_block(self, gen: np.random.Generator, start: int, stop: int) -> np.ndarray:
        cfg = self.cfg
        ens = cfg.ensemble
        emission = prepare_block(ens, cfg.spin, gen, stop - start)
        x = transport_positions(emission.v0, cfg.steps, ens, ens.rho, KinematicCoeffs.free())
        return np.rint(x[:, ens.active_dims[0]]).astype(np.int64)

    def _trajectories(self, count: int = 9) -> pd.DataFrame:
        cfg = self.cfg
        ens = cfg.ensemble
        axis = ens.active_dims[0]
        centre = ensemble_centre(ens)
        frames = []
        for v in np.linspace(-0.8, 0.8, count):
            v0 = np.zeros(3)
            v0[axis] = v
            positions, propensities = integrate_trajectory(
                centre, v0, ens, ens.rho, KinematicCoeffs.free(), cfg.steps, cfg.filter_tau
            )
            frames.append(
                pd.DataFrame(
                    {"v0": v, "t": np.arange(cfg.steps + 1), "x": positions[:, axis], "v_q": propensities[:, axis]}
                )
            )
        return pd.concat(frames, ignore_index=True)

    def _run_walk(self) -> pd.DataFrame:
        cfg = self.cfg
        ens = cfg.ensemble
        axis = ens.active_dims[0]
        if cfg.mode == "microscopic":
            scenario = WalkScenario(ens, cfg.steps, cfg.n_train, ens.active_dims, cfg.spin)
            histogram = run_walk_ensemble(scenario, cfg.n_p, cfg.seed)
            by_x = histogram.groupby(f"x{axis + 1}")["count"].sum()
        else:
            parts = self._map_blocks(self._walk_block, cfg.n_p, 0)
            positions = np.concatenate(parts) if parts else np.array([], dtype=np.int64)
            by_x = pd.Series(positions).value_counts()
            self.tables["trajectories"] = self._trajectories()

        table = walk_reference(cfg)
        counts = by_x.reindex(table["x"], fill_value=0).to_numpy()
        self.counters["outside_grid"] += int(by_x.sum() - counts.sum())
        n = int(counts.sum())
        table.insert(1, "count", counts)
        table.insert(2, "frequency", counts / n if n else np.zeros(len(counts)))
        self.tables["walk"] = table

        row: Dict[str, Any] = {"setting": 0, "angle": 0.0, "n": n}
        if n:
            fringes = fringe_comparison(table["x"].to_numpy(), table["frequency"].to_numpy(), table["reference"].to_numpy())
            row.update(compare_distributions(counts, table["reference"].to_numpy()))
            row.update({"fringe_offset": fringes["max_offset"], "contrast": fringes["contrast"]})
            self.summary.update(fringes)
        self.summary.update({k: v for k, v in row.items() if k not in ("setting", "angle")})
        return pd.DataFrame([row])


def run_scenario(cfg: ScenarioConfig, out_dir: Optional[str] = None, check: bool = False) -> RunReport:
    report = ScenarioRunner(cfg).run()
    if check:
        report.checks = run_checks(report)
    target = out_dir or cfg.out_dir
    if target:
        emit_outputs(report, target)
    return report


# ---------------------------------------------------------------------------
# Acceptance checks
# ---------------------------------------------------------------------------


def _check(name: str, value: float, threshold: float, passed: bool, detail: str = "") -> CheckResult:
    return CheckResult(name=name, passed=bool(passed), value=float(value), threshold=float(threshold), detail=detail)


def _max_abs(values) -> float:
    values = np.asarray(values, dtype=float)
    if not values.size or np.all(np.isnan(values)):
        return math.nan
    return float(np.nanmax(np.abs(values)))


def _checks_homogeneous(report: RunReport) -> List[CheckResult]:
    deviation = _max_abs(report.settings["deviation"])
    return [_check("spin_law", deviation, 0.005, deviation <= 0.005)]


def _checks_sg_single(report: RunReport) -> List[CheckResult]:
    s = report.summary
    flips = s.get("spin_flips", 0)
    tv = s.get("tv_oracle", math.nan)
    offset = s.get("s3_extrema_offset", math.inf)
    shape = bool(s.get("s3_sign_change")) and bool(s.get("s3_extrema_opposite"))
    return [
        _check("spin_persistence", flips, 0, flips == 0, f"{report.counters.get('persistence_trials', 0)} trials"),
        _check("sg_profile_tv", tv, 0.10, tv <= 0.10),
        _check("spin_density_sign", float(shape), 1, shape),
        _check("spin_density_extrema", offset, 2, offset <= 2),
    ]


def _checks_sg_cascade(report: RunReport) -> List[CheckResult]:
    deviation = _max_abs(report.settings["deviation"])
    return [_check("cascade_conditional", deviation, 0.01, deviation <= 0.01)]


def _checks_spin1_cascade(report: RunReport) -> List[CheckResult]:
    deviation = _max_abs(report.settings["deviation"])
    gap = report.summary.get("max_oracle_gap", math.nan)
    return [
        _check("spin1_conditional", deviation, 0.01, deviation <= 0.01),
        _check("spin1_wigner", gap, 1e-10, gap <= 1e-10),
    ]


def _checks_bell(report: RunReport) -> List[CheckResult]:
    settings = report.settings
    sweep = settings[settings["label"] == "sweep"]
    loose = ", ".join(f"{a:.4f}" for a in sweep.loc[~sweep["selective"], "angle"])
    detail = f"non-selective angles: {loose}" if loose else ""

    pmf_gap = _max_abs(
        np.concatenate(
            [
                sweep[["rho_pp", "rho_mm"]].to_numpy().ravel() - np.repeat(sweep["ref_same"].to_numpy(), 2),
                sweep[["rho_pm", "rho_mp"]].to_numpy().ravel() - np.repeat(sweep["ref_opp"].to_numpy(), 2),
                (sweep["correlation"] - sweep["ref_correlation"]).to_numpy(),
            ]
        )
    )
    marginals = _max_abs(np.concatenate([sweep["marginal_first"] - 0.5, sweep["marginal_second"] - 0.5]))
    near = float(sweep["near_bisector"].min()) if len(sweep) else math.nan
    uniformity = report.summary.get("grid_uniformity_p", math.nan)
    checks = [
        _check("bell_joint_pmf", pmf_gap, 0.05, len(sweep) > 0 and pmf_gap <= 0.05, detail),
        _check("no_signalling", marginals, 0.02, marginals <= 0.02),
        _check("measurement_dependence", near, 0.95, near >= 0.95),
        _check("grid_uniformity", uniformity, 0.01, uniformity >= 0.01),
    ]
    if "chsh" in report.summary:
        value = report.summary["chsh"]
        checks.append(_check("chsh", value, 2.6, value >= 2.6))
    return checks


def _checks_walk(report: RunReport) -> List[CheckResult]:
    s = report.summary
    offset = s.get("max_offset", math.inf)
    contrast = s.get("contrast", 0.0)
    return [
        _check("fringe_positions", offset, 1, bool(s.get("matched")) and offset <= 1),
        _check("fringe_contrast", contrast, 0.5, contrast >= 0.5),
    ]


CHECKS: Dict[str, Callable[[RunReport], List[CheckResult]]] = {
    "homogeneous": _checks_homogeneous,
    "sg_single": _checks_sg_single,
    "sg_cascade": _checks_sg_cascade,
    "spin1_cascade": _checks_spin1_cascade,
    "bell": _checks_bell,
    "walk": _checks_walk,
}


def run_checks(report: RunReport) -> List[CheckResult]:
    checks = CHECKS[report.kind](report)
    for check in checks:
        log = logger.info if check.passed else logger.warning
        log("Check %s %s (value=%.6g, threshold=%.6g)", check.name, "passed" if check.passed else "FAILED", check.value, check.threshold)
    return checks


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------


def emit_outputs(report: RunReport, out_dir: str) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = [
        write_json(report.config, os.path.join(out_dir, "config.json")),
        write_json(report.document(), os.path.join(out_dir, "summary.json")),
        write_csv(report.settings, os.path.join(out_dir, "settings.csv")),
    ]
    for name, table in report.tables.items():
        paths.append(write_csv(table, os.path.join(out_dir, f"{name}.csv")))
    logger.info("Wrote %d files to %s", len(paths), out_dir)
    return paths
