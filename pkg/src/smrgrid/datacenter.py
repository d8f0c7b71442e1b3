"""Datacenter demand pipeline: workload-trace binning, capacity estimation,
the affine IT power model, and the staged chiller-bank cooling model.

All operations are pure functions on immutable inputs; the 5-minute bin
width is fixed by the profile contract.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BIN_SECONDS = 300


class TraceError(Exception):
    """Malformed trace input."""


@dataclass(frozen=True)
class TaskRecord:
    start: float  # s
    end: float
    cpu: float  # capacity units while active

    def __post_init__(self):
        if self.end <= self.start:
            raise TraceError(f"task end {self.end} <= start {self.start}")
        if self.cpu < 0:
            raise TraceError("task cpu must be >= 0")


@dataclass(frozen=True)
class MachineEvent:
    t: float
    kind: str  # add | remove | update
    machine_id: str
    capacity: float = 0.0

    def __post_init__(self):
        if self.kind not in ("add", "remove", "update"):
            raise TraceError(f"unknown machine event kind '{self.kind}'")
        if self.capacity < 0:
            raise TraceError("capacity must be >= 0")


@dataclass(frozen=True)
class UtilizationTrace:
    u: np.ndarray  # normalized utilization per 5-minute bin
    bin_seconds: int = BIN_SECONDS

    def __post_init__(self):
        if self.bin_seconds != BIN_SECONDS:
            raise TraceError("bin width is fixed at 300 s")
        u = np.asarray(self.u, dtype=float)
        if u.size and (u.min() < 0.0 or u.max() > 1.0):
            raise TraceError("utilization values must lie in [0, 1]")
        object.__setattr__(self, "u", u)


@dataclass(frozen=True)
class ItPowerParams:
    p_max: float  # MW peak IT capacity
    idle_fraction: float = 0.5

    def __post_init__(self):
        if self.p_max <= 0:
            raise ValueError("p_max must be > 0")
        if not (0.0 <= self.idle_fraction <= 1.0):
            raise ValueError("idle_fraction must be in [0, 1]")

    @property
    def p_idle(self) -> float:
        return self.idle_fraction * self.p_max


@dataclass(frozen=True)
class AmbientConditions:
    t_amb: float = 30.0  # C
    phi_amb: float = 0.5  # relative humidity
    t_rw: float = 15.0  # return chilled water, C

    def __post_init__(self):
        if not (0.0 <= self.phi_amb <= 1.0):
            raise ValueError("phi_amb must be in [0, 1]")


@dataclass(frozen=True)
class ChillerParams:
    # cubic-in-flow subsystem coefficients: (c1, c2, c3, c0) -> kW
    alpha: tuple[float, float, float, float]  # tower fan vs m_dot_tf
    beta: tuple[float, float, float, float]  # condenser pump vs m_dot_cd
    gamma: tuple[float, float, float, float]  # evaporator pump vs m_dot_ev
    # multilinear compressor surrogate (q0..q5), see compressor_power
    compressor_coeffs: tuple[float, float, float, float, float, float]
    q_rated: float  # MW-thermal per chiller
    n_total: int
    flow_min: tuple[float, float, float]  # (tf, cd, ev) kg/s
    flow_rated: tuple[float, float, float]

    def __post_init__(self):
        if self.q_rated <= 0:
            raise ValueError("q_rated must be > 0")
        if self.n_total < 1:
            raise ValueError("n_total must be >= 1")
        for lo, hi in zip(self.flow_min, self.flow_rated):
            if lo > hi:
                raise ValueError("min flow exceeds rated flow")


#: Illustrative coefficient set with plausible magnitudes (about COP 4 at the
#: rated point). Not identified from any measured plant.
DEFAULT_CHILLER = ChillerParams(
    alpha=(2.0, 0.04, 2e-4, 10.0),
    beta=(1.0, 0.004, 5e-6, 12.0),
    gamma=(1.0, 0.005, 8e-6, 10.0),
    compressor_coeffs=(150.0, 10.0, 20.0, 100.0, 8.0, 0.1),
    q_rated=10.0,
    n_total=8,
    flow_min=(15.0, 36.0, 30.0),
    flow_rated=(50.0, 120.0, 100.0),
)


@dataclass(frozen=True)
class LoadProfile:
    timestamps: np.ndarray  # s, 5-minute grid
    u: np.ndarray
    p_it: np.ndarray  # MW
    q_cool: np.ndarray  # MW-thermal
    n_ch: np.ndarray  # active chillers
    p_thermal: np.ndarray  # MW electrical cooling draw

    def __post_init__(self):
        n = len(self.timestamps)
        for name in ("u", "p_it", "q_cool", "n_ch", "p_thermal"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"series length mismatch in '{name}'")

    @property
    def p_total(self) -> np.ndarray:
        return self.p_it + self.p_thermal

    def __len__(self) -> int:
        return len(self.timestamps)


# -- trace processing --------------------------------------------------------


def bin_tasks(tasks: list[TaskRecord], t0: float, t1: float) -> np.ndarray:
    """Per-bin cpu totals: each task spreads its cpu in proportion to the
    overlap of its active interval with each 5-minute bin."""
    if t1 <= t0:
        raise TraceError("t1 must be > t0")
    n_bins = math.ceil((t1 - t0) / BIN_SECONDS)
    out = np.zeros(n_bins)
    for task in tasks:
        a = max(task.start, t0)
        b = min(task.end, t1)
        if b <= a:
            continue
        first = int((a - t0) // BIN_SECONDS)
        last = int(math.ceil((b - t0) / BIN_SECONDS))
        for k in range(first, last):
            lo = t0 + k * BIN_SECONDS
            overlap = min(b, lo + BIN_SECONDS) - max(a, lo)
            if overlap > 0:
                out[k] += task.cpu * overlap / BIN_SECONDS
    return out


def estimate_capacity(events: list[MachineEvent], t0: float, t1: float) -> np.ndarray:
    """Per-bin time-weighted average of total fleet capacity from the
    add/remove/update event stream."""
    if t1 <= t0:
        raise TraceError("t1 must be > t0")
    n_bins = math.ceil((t1 - t0) / BIN_SECONDS)
    out = np.zeros(n_bins)
    fleet: dict[str, float] = {}
    total = 0.0
    changes: list[tuple[float, float]] = []  # (time, new total)
    for ev in sorted(events, key=lambda e: e.t):
        if ev.kind == "add":
            if ev.machine_id in fleet:
                warnings.warn(f"duplicate add for machine {ev.machine_id}; ignored")
                continue
            fleet[ev.machine_id] = ev.capacity
            total += ev.capacity
        elif ev.kind == "remove":
            if ev.machine_id not in fleet:
                warnings.warn(f"remove for unknown machine {ev.machine_id}; ignored")
                continue
            total -= fleet.pop(ev.machine_id)
        else:  # update
            if ev.machine_id not in fleet:
                warnings.warn(f"update for unknown machine {ev.machine_id}; ignored")
                continue
            total += ev.capacity - fleet[ev.machine_id]
            fleet[ev.machine_id] = ev.capacity
        changes.append((ev.t, total))

    # Integrate the running total over each bin.
    level = 0.0
    ci = 0
    while ci < len(changes) and changes[ci][0] <= t0:
        level = changes[ci][1]
        ci += 1
    for k in range(n_bins):
        lo = t0 + k * BIN_SECONDS
        hi = min(lo + BIN_SECONDS, t1)
        acc = 0.0
        cur = lo
        while ci < len(changes) and changes[ci][0] < hi:
            tc, lvl = changes[ci]
            acc += level * (tc - cur)
            level = lvl
            cur = tc
            ci += 1
        acc += level * (hi - cur)
        out[k] = acc / (hi - lo)
    return out


def normalize(usage: np.ndarray, capacity: np.ndarray) -> UtilizationTrace:
    usage = np.asarray(usage, dtype=float)
    capacity = np.asarray(capacity, dtype=float)
    if usage.shape != capacity.shape:
        raise TraceError("usage and capacity series length mismatch")
    u = np.zeros_like(usage)
    ok = capacity > 0
    if not np.all(ok):
        warnings.warn("zero-capacity bins set to u=0")
    u[ok] = np.clip(usage[ok] / capacity[ok], 0.0, 1.0)
    return UtilizationTrace(u=u)


# -- power models ------------------------------------------------------------


def it_power(u, params: ItPowerParams):
    """Affine utilization-to-power map: P_idle at u=0, P_max at u=1. MW."""
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr < 0) or np.any(u_arr > 1):
        raise ValueError("utilization must lie in [0, 1]")
    out = params.p_idle + (params.p_max - params.p_idle) * u_arr
    return float(out) if np.isscalar(u) else out


def subsystem_power(m_dot: float, coeffs) -> float:
    """Cubic pump/fan draw c1*m + c2*m^2 + c3*m^3 + c0, floored at 0. kW."""
    if m_dot < 0:
        raise ValueError("mass flow must be >= 0")
    c1, c2, c3, c0 = coeffs
    return max(c1 * m_dot + c2 * m_dot**2 + c3 * m_dot**3 + c0, 0.0)


def compressor_power(cond: AmbientConditions, flows, coeffs) -> float:
    """Multilinear surrogate for the compressor draw, kW.

    P = q0 + q1*T_rw + q2*T_amb + q3*phi + q4*m_ev + q5*m_ev*(T_amb - T_rw),
    floored at 0. Stands in for an unidentified black-box map.
    """
    m_tf, m_cd, m_ev = flows
    if min(m_tf, m_cd, m_ev) < 0:
        raise ValueError("mass flows must be >= 0")
    q0, q1, q2, q3, q4, q5 = coeffs
    p = (
        q0
        + q1 * cond.t_rw
        + q2 * cond.t_amb
        + q3 * cond.phi_amb
        + q4 * m_ev
        + q5 * m_ev * (cond.t_amb - cond.t_rw)
    )
    return max(p, 0.0)


def chiller_unit_power(cond: AmbientConditions, flows, params: ChillerParams) -> float:
    """Single-chiller electrical draw: fan + both pumps + compressor, kW."""
    m_tf, m_cd, m_ev = flows
    return (
        subsystem_power(m_tf, params.alpha)
        + subsystem_power(m_cd, params.beta)
        + subsystem_power(m_ev, params.gamma)
        + compressor_power(cond, flows, params.compressor_coeffs)
    )


def staging_and_thermal(
    q_cool: float, cond: AmbientConditions, params: ChillerParams
) -> tuple[int, float]:
    """Chiller staging and bank electrical draw for a thermal demand.

    Chillers stage in ceil(q_cool / q_rated) units sharing the load evenly;
    per-chiller flows interpolate between minimum and rated by load fraction.
    Returns (active chillers, electrical MW).
    """
    if q_cool < 0:
        raise ValueError("q_cool must be >= 0")
    cap = params.n_total * params.q_rated
    if q_cool > cap + 1e-9:
        raise ValueError(
            f"cooling capacity exceeded: {q_cool:.3f} MW-th > {cap:.3f} MW-th"
        )
    if q_cool == 0:
        return 0, 0.0
    n_ch = min(params.n_total, math.ceil(q_cool / params.q_rated - 1e-12))
    frac = (q_cool / n_ch) / params.q_rated
    flows = tuple(
        lo + frac * (hi - lo)
        for lo, hi in zip(params.flow_min, params.flow_rated)
    )
    p_ch_kw = chiller_unit_power(cond, flows, params)
    return n_ch, n_ch * p_ch_kw / 1000.0


def build_profile(
    trace: UtilizationTrace,
    it: ItPowerParams,
    chiller: ChillerParams = DEFAULT_CHILLER,
    ambient: AmbientConditions | list[AmbientConditions] = AmbientConditions(),
    t_start: float = 0.0,
) -> LoadProfile:
    """End-to-end profile: IT power per bin, unity heat rejection into the
    chiller bank, staged cooling draw."""
    n = len(trace.u)
    if isinstance(ambient, AmbientConditions):
        amb_series = [ambient] * n
    else:
        if len(ambient) != n:
            raise ValueError("ambient series length mismatch")
        amb_series = list(ambient)
    p_it = it_power(trace.u, it)
    q_cool = p_it.copy()  # every IT watt rejected as heat
    n_ch = np.zeros(n, dtype=int)
    p_th = np.zeros(n)
    for k in range(n):
        n_ch[k], p_th[k] = staging_and_thermal(q_cool[k], amb_series[k], chiller)
    ts = t_start + BIN_SECONDS * np.arange(n, dtype=float)
    return LoadProfile(
        timestamps=ts, u=trace.u.copy(), p_it=p_it, q_cool=q_cool,
        n_ch=n_ch, p_thermal=p_th,
    )


def calibrate_it_capacity(
    target_total_peak_mw: float,
    chiller: ChillerParams = DEFAULT_CHILLER,
    ambient: AmbientConditions = AmbientConditions(),
    idle_fraction: float = 0.5,
    tol: float = 1e-6,
) -> ItPowerParams:
    """IT capacity such that IT + cooling at full utilization meets a target
    total peak (bisection on p_max)."""
    def total(p_max):
        _, p_th = staging_and_thermal(p_max, ambient, chiller)
        return p_max + p_th

    lo, hi = 1e-3, target_total_peak_mw
    if total(hi) < target_total_peak_mw:
        raise ValueError("target peak exceeds plant capability")
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if total(mid) < target_total_peak_mw:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return ItPowerParams(p_max=hi, idle_fraction=idle_fraction)


# -- CSV boundary ------------------------------------------------------------


def read_tasks_csv(path: str | Path) -> list[TaskRecord]:
    """Task CSV with header start_s,end_s,cpu."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"start_s", "end_s", "cpu"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise TraceError(f"{path}: expected header start_s,end_s,cpu")
        for ln, row in enumerate(reader, start=2):
            try:
                out.append(
                    TaskRecord(
                        start=float(row["start_s"]),
                        end=float(row["end_s"]),
                        cpu=float(row["cpu"]),
                    )
                )
            except (TypeError, ValueError, TraceError) as exc:
                raise TraceError(f"{path}:{ln}: {exc}") from exc
    return out


def read_machine_events_csv(path: str | Path) -> list[MachineEvent]:
    """Machine-event CSV with header t_s,kind,machine_id,capacity."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"t_s", "kind", "machine_id", "capacity"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise TraceError(f"{path}: expected header t_s,kind,machine_id,capacity")
        for ln, row in enumerate(reader, start=2):
            try:
                out.append(
                    MachineEvent(
                        t=float(row["t_s"]),
                        kind=row["kind"].strip().lower(),
                        machine_id=row["machine_id"],
                        capacity=float(row["capacity"] or 0.0),
                    )
                )
            except (TypeError, ValueError, TraceError) as exc:
                raise TraceError(f"{path}:{ln}: {exc}") from exc
    return out


def write_profile_csv(profile: LoadProfile, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["timestamp_s", "u", "p_it_mw", "q_cool_mwth", "n_ch", "p_thermal_mw",
             "p_total_mw"]
        )
        for k in range(len(profile)):
            w.writerow(
                [
                    f"{profile.timestamps[k]:.0f}",
                    f"{profile.u[k]:.6f}",
                    f"{profile.p_it[k]:.6f}",
                    f"{profile.q_cool[k]:.6f}",
                    int(profile.n_ch[k]),
                    f"{profile.p_thermal[k]:.6f}",
                    f"{profile.p_total[k]:.6f}",
                ]
            )


def read_profile_csv(path: str | Path) -> LoadProfile:
    ts, u, p_it, q, n, p_th = [], [], [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            ts.append(float(row["timestamp_s"]))
            u.append(float(row["u"]))
            p_it.append(float(row["p_it_mw"]))
            q.append(float(row["q_cool_mwth"]))
            n.append(int(row["n_ch"]))
            p_th.append(float(row["p_thermal_mw"]))
    return LoadProfile(
        timestamps=np.array(ts), u=np.array(u), p_it=np.array(p_it),
        q_cool=np.array(q), n_ch=np.array(n), p_thermal=np.array(p_th),
    )
