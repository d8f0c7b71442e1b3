"""Two-step stability methodology: per-snapshot power flow, contingency
injection at a fixed apply time, metric extraction, and paired comparison of
the grid-only and IES-backed datacenter configurations.

Pairs share the exact same case, snapshot, and resolved event list; only the
presence of the local SMR+BESS differs.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dynamics as dyn
from . import powerflow as pf
from .datacenter import LoadProfile
from .network import BusKind, NetworkCase, build_ybus


class ScenarioError(Exception):
    pass


@dataclass(frozen=True)
class IesSpec:
    smr_rating_mw: float = 50.0
    bess_rating_mw: float = 10.0
    smr_params: dyn.SmrParams = field(default_factory=dyn.SmrParams)
    smr_machine: dyn.MachineParams = field(
        default_factory=lambda: dyn.MachineParams(h=6.0, d=10.0, xd_p=0.3, mva_base=60.0)
    )
    bess_params: dyn.BessParams = field(default_factory=dyn.BessParams)
    thermal_extraction_factor: float = 1.0  # cooling MW-th routed to the SMR

    @property
    def capacity_mw(self) -> float:
        return self.smr_rating_mw + self.bess_rating_mw


@dataclass(frozen=True)
class Configuration:
    kind: str  # "grid_only" | "with_ies"
    dc_bus: int
    ies: IesSpec | None = None
    dc_power_factor: float = 0.98

    def __post_init__(self):
        if self.kind not in ("grid_only", "with_ies"):
            raise ScenarioError(f"unknown configuration kind '{self.kind}'")
        if self.kind == "with_ies" and self.ies is None:
            raise ScenarioError("with_ies configuration requires an ies section")

    def q_for(self, p_mw: float) -> float:
        phi = math.acos(self.dc_power_factor)
        return p_mw * math.tan(phi)


@dataclass(frozen=True)
class ContingencySpec:
    kind: str  # bus_fault | line_trip | gen_trip | load_step
    target: int | tuple[int, int] | None = None  # explicit id(s); None = random
    max_distance: int = 3  # hops from the POI for random selection
    t_apply: float = 3.0
    duration: float = 0.1  # faults only
    rng_seed: int = 0
    fault_admittance: complex = -1e4j
    load_step_mw: float = 0.0
    load_step_mvar: float = 0.0

    def __post_init__(self):
        if self.kind not in ("bus_fault", "line_trip", "gen_trip", "load_step"):
            raise ScenarioError(f"unknown contingency kind '{self.kind}'")
        if self.t_apply <= 0:
            raise ScenarioError("t_apply must be > 0")
        if self.kind == "bus_fault" and self.duration <= 0:
            raise ScenarioError("fault duration must be > 0")


@dataclass(frozen=True)
class StabilityMetrics:
    f_nadir_hz: float
    f_peak_hz: float
    v_min_pu: float
    v_max_pu: float
    t_settle_f: float
    t_settle_v: float
    f_settled: bool
    v_settled: bool
    rocof_max_hz_per_s: float


@dataclass
class ComparisonPair:
    scenario_id: str
    snapshot_bin: int
    events: list[dict]
    grid_only: StabilityMetrics
    with_ies: StabilityMetrics

    def deltas(self) -> dict:
        return {
            "abs_f_nadir": abs(self.with_ies.f_nadir_hz) - abs(self.grid_only.f_nadir_hz),
            "v_min": self.with_ies.v_min_pu - self.grid_only.v_min_pu,
            "t_settle_f": self.with_ies.t_settle_f - self.grid_only.t_settle_f,
        }

    def wins(self, settle_tolerance_s: float = 0.1) -> dict:
        """Per-metric "IES no worse" outcomes. Settling differences below
        settle_tolerance_s (two washout time constants) count as ties: they
        sit under the resolution of the filtered frequency measurement."""
        d = self.deltas()
        return {
            "f_nadir": d["abs_f_nadir"] <= 0.0,
            "v_min": d["v_min"] >= 0.0,
            "t_settle_f": d["t_settle_f"] <= settle_tolerance_s,
        }


@dataclass
class ComparisonReport:
    pairs: list[ComparisonPair]
    failed: list[dict] = field(default_factory=list)

    def aggregate(self) -> dict:
        n = len(self.pairs)
        agg = {"pairs": n, "failed": len(self.failed)}
        for key in ("f_nadir", "v_min", "t_settle_f"):
            agg[f"wins_{key}"] = sum(1 for p in self.pairs if p.wins()[key])
        return agg

    def to_json(self) -> str:
        doc = {
            "aggregate": self.aggregate(),
            "pairs": [
                {
                    "scenario_id": p.scenario_id,
                    "snapshot_bin": p.snapshot_bin,
                    "events": p.events,
                    "grid_only": asdict(p.grid_only),
                    "with_ies": asdict(p.with_ies),
                    "deltas": p.deltas(),
                    "wins": p.wins(),
                }
                for p in self.pairs
            ],
            "failed": self.failed,
        }
        return json.dumps(doc, indent=1, sort_keys=True)


# -- snapshot sweep ----------------------------------------------------------


@dataclass
class SweepResult:
    timestamps: np.ndarray
    converged: np.ndarray  # bool per bin
    poi_v_mag: np.ndarray
    slack_p_mw: np.ndarray
    iterations: np.ndarray

    @property
    def n_failed(self) -> int:
        return int(np.sum(~self.converged))


def snapshot_case(
    case: NetworkCase, cfg: Configuration, p_dc_mw: float
) -> tuple[NetworkCase, float]:
    """Snapshot case with the datacenter load applied; returns the case and
    the netted IES dispatch (SMR only; the battery idles pre-fault)."""
    q_dc = cfg.q_for(p_dc_mw)
    smr_dispatch = 0.0
    if cfg.kind == "with_ies":
        smr_dispatch = min(p_dc_mw, cfg.ies.smr_rating_mw)
    snap = pf.apply_snapshot(
        case, cfg.dc_bus, p_dc_mw, q_dc,
        local_gen_mw=smr_dispatch,
        local_gen_limit_mw=cfg.ies.smr_rating_mw if cfg.ies else None,
    )
    return snap, smr_dispatch


def snapshot_sweep(
    case: NetworkCase,
    profile: LoadProfile,
    cfg: Configuration,
    opts: pf.PowerFlowOptions = pf.PowerFlowOptions(),
) -> SweepResult:
    """One power-flow solve per profile bin; non-convergence is recorded,
    not fatal. Warm-started from the previous bin's solution."""
    if len(profile) == 0:
        raise ScenarioError("empty profile")
    n = len(profile)
    conv = np.zeros(n, dtype=bool)
    vpoi = np.full(n, np.nan)
    slack = np.full(n, np.nan)
    iters = np.zeros(n, dtype=int)
    poi = case.bus_index(cfg.dc_bus)
    ybus = build_ybus(case)  # topology is load-independent across the sweep
    v_warm = None
    for k in range(n):
        snap, _ = snapshot_case(case, cfg, float(profile.p_total[k]))
        sol = pf.solve(snap, ybus, opts, v0=v_warm)
        conv[k] = sol.converged
        iters[k] = sol.iterations
        if sol.converged:
            vpoi[k] = abs(sol.v[poi])
            slack[k] = sol.slack_p * case.system_mva_base
            v_warm = sol.v
        else:
            v_warm = None
    return SweepResult(
        timestamps=profile.timestamps.copy(),
        converged=conv, poi_v_mag=vpoi, slack_p_mw=slack, iterations=iters,
    )


# -- contingency construction ------------------------------------------------


def electrical_neighborhood(case: NetworkCase, bus: int, k: int) -> set[int]:
    """Bus ids within k in-service branch hops of the given bus."""
    adj: dict[int, set[int]] = {b.id: set() for b in case.buses}
    for br in case.branches:
        if br.status:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
    seen = {bus: 0}
    dq = deque([bus])
    while dq:
        cur = dq.popleft()
        if seen[cur] >= k:
            continue
        for nb in adj[cur]:
            if nb not in seen:
                seen[nb] = seen[cur] + 1
                dq.append(nb)
    return set(seen)


def resolve_events(
    case: NetworkCase, cfg: Configuration, spec: ContingencySpec
) -> list[dyn.Event]:
    """Concrete event list for a contingency spec. Random targets draw from
    the POI's electrical neighborhood with the spec's own seed, so paired
    runs resolve identically."""
    rng = np.random.default_rng(spec.rng_seed)
    near = sorted(electrical_neighborhood(case, cfg.dc_bus, spec.max_distance))
    if spec.kind == "bus_fault":
        if spec.target is not None:
            bus = int(spec.target)
        else:
            cands = [b for b in near if b != cfg.dc_bus]
            bus = int(rng.choice(cands))
        return [
            dyn.Event(spec.t_apply, dyn.BusFault3ph(bus, spec.fault_admittance)),
            dyn.Event(spec.t_apply + spec.duration, dyn.ClearFault(bus)),
        ]
    if spec.kind == "line_trip":
        if spec.target is not None:
            f, t = spec.target
        else:
            nearset = set(near)
            cands = [
                (br.from_bus, br.to_bus)
                for br in case.branches
                if br.status and br.from_bus in nearset and br.to_bus in nearset
            ]
            # Never trip the last path out of the POI.
            poi_deg = sum(
                1 for br in case.branches
                if br.status and cfg.dc_bus in (br.from_bus, br.to_bus)
            )
            if poi_deg <= 1:
                cands = [c for c in cands if cfg.dc_bus not in c]
            if not cands:
                raise ScenarioError("no line-trip candidates near the POI")
            f, t = cands[int(rng.integers(len(cands)))]
        return [dyn.Event(spec.t_apply, dyn.LineTrip(int(f), int(t)))]
    if spec.kind == "gen_trip":
        if spec.target is not None:
            bus = int(spec.target)
        else:
            slack_id = case.buses[case.slack_index].id
            nearset = set(near)
            cands = sorted(
                {
                    g.bus
                    for g in case.generators
                    if g.status and g.bus in nearset
                    and g.bus not in (cfg.dc_bus, slack_id)
                }
            )
            if not cands:
                raise ScenarioError("no gen-trip candidates near the POI")
            bus = int(rng.choice(cands))
        return [dyn.Event(spec.t_apply, dyn.GenTrip(bus))]
    # load_step
    bus = int(spec.target) if spec.target is not None else cfg.dc_bus
    return [
        dyn.Event(spec.t_apply, dyn.LoadStep(bus, spec.load_step_mw, spec.load_step_mvar))
    ]


def build_devices(
    case_snap: NetworkCase,
    cfg: Configuration,
    smr_dispatch_mw: float,
    thermal_mw: float,
) -> dyn.DeviceSet:
    machines = dyn.default_machines(case_snap)
    smr = bess = None
    if cfg.kind == "with_ies":
        ies = cfg.ies
        smr = dyn.SmrUnit(
            bus=cfg.dc_bus,
            machine=ies.smr_machine,
            params=ies.smr_params,
            p_dispatch_mw=smr_dispatch_mw,
            thermal_mw=min(
                thermal_mw * ies.thermal_extraction_factor, ies.smr_params.q_dot_max
            ),
        )
        bess = dyn.BessDevice(
            bus=cfg.dc_bus,
            params=dyn.BessParams(
                k_p=ies.bess_params.k_p,
                k_i=ies.bess_params.k_i,
                p_rating=ies.bess_rating_mw,
                integrator_limit=ies.bess_params.integrator_limit,
            ),
        )
    return dyn.DeviceSet(machines=machines, smr=smr, bess=bess)


def run_contingency(
    case: NetworkCase,
    profile: LoadProfile,
    snapshot_bin: int,
    cfg: Configuration,
    spec: ContingencySpec,
    simcfg: dyn.SimConfig,
    events: list[dyn.Event] | None = None,
) -> dyn.TransientResult:
    """Power flow at one profile bin, then the transient with the resolved
    contingency events, monitoring the POI."""
    p_dc = float(profile.p_total[snapshot_bin])
    q_th = float(profile.q_cool[snapshot_bin])
    snap, smr_dispatch = snapshot_case(case, cfg, p_dc)
    ybus = build_ybus(snap)
    sol = pf.solve(snap, ybus)
    if not sol.converged:
        raise ScenarioError(f"snapshot bin {snapshot_bin} did not converge")
    if events is None:
        events = resolve_events(snap, cfg, spec)
    devices = build_devices(snap, cfg, smr_dispatch, q_th)
    if cfg.dc_bus not in simcfg.monitor_buses:
        simcfg = dyn.SimConfig(
            dt=simcfg.dt,
            t_end=simcfg.t_end,
            freq_filter_tc=simcfg.freq_filter_tc,
            monitor_buses=tuple(simcfg.monitor_buses) + (cfg.dc_bus,),
            f_nominal=simcfg.f_nominal,
        )
    return dyn.run_transient(snap, sol, devices, events, simcfg, ybus=ybus)


# -- metrics -----------------------------------------------------------------


def extract_metrics(
    result: dyn.TransientResult,
    t_apply: float,
    poi_bus: int | None = None,
    f_band_hz: float = 0.02,
    v_band_pu: float = 0.01,
) -> StabilityMetrics:
    """Nadir/peak, settling times against the post-fault steady value, and
    maximum RoCoF, all evaluated from the apply time onward."""
    if poi_bus is None:
        poi_bus = next(iter(result.v_mag))
    t = result.t
    if t.size == 0:
        raise ScenarioError("empty result series")
    if t[-1] <= t_apply:
        raise ScenarioError("result horizon ends before t_apply")
    f = result.freq_dev[poi_bus]
    v = result.v_mag[poi_bus]
    w = t >= t_apply
    fw, vw, tw = f[w], v[w], t[w]
    dt = t[1] - t[0]
    tail = max(int(1.0 / dt), 1)  # last second defines the steady value
    f_steady = float(np.mean(fw[-tail:]))
    v_steady = float(np.mean(vw[-tail:]))

    def settle(series, steady, band):
        out = np.abs(series - steady) > band
        if not np.any(out):
            return float(t_apply), True
        last = int(np.max(np.nonzero(out)))
        if last >= len(series) - 1:
            return float(tw[-1]), False
        return float(tw[last + 1]), True

    t_f, f_ok = settle(fw, f_steady, f_band_hz)
    t_v, v_ok = settle(vw, v_steady, v_band_pu)
    rocof = float(np.max(np.abs(np.gradient(fw, dt)))) if fw.size > 2 else 0.0
    return StabilityMetrics(
        f_nadir_hz=float(min(fw.min(), 0.0)),
        f_peak_hz=float(max(fw.max(), 0.0)),
        v_min_pu=float(vw.min()),
        v_max_pu=float(vw.max()),
        t_settle_f=t_f,
        t_settle_v=t_v,
        f_settled=f_ok,
        v_settled=v_ok,
        rocof_max_hz_per_s=rocof,
    )


# -- paired comparison -------------------------------------------------------


def select_snapshot_bins(profile: LoadProfile, selector) -> list[int]:
    """{min, median, max} labels or explicit indices into the profile."""
    total = profile.p_total
    out = []
    for sel in selector:
        if sel == "min":
            out.append(int(np.argmin(total)))
        elif sel == "max":
            out.append(int(np.argmax(total)))
        elif sel == "median":
            order = np.argsort(total, kind="stable")
            out.append(int(order[len(order) // 2]))
        else:
            out.append(int(sel))
    return out


def compare(
    case: NetworkCase,
    profile: LoadProfile,
    specs: list[ContingencySpec],
    simcfg: dyn.SimConfig,
    ies_config: Configuration,
    snapshot_selector=("median",),
    jobs: int = 1,
) -> ComparisonReport:
    """Run every (contingency, snapshot) pair under both configurations with
    identical events; a failed run voids only its pair."""
    if not specs:
        raise ScenarioError("no contingency specs")
    if ies_config.kind != "with_ies":
        raise ScenarioError("compare requires the with_ies configuration")
    grid_config = Configuration(
        kind="grid_only", dc_bus=ies_config.dc_bus,
        dc_power_factor=ies_config.dc_power_factor,
    )
    bins = select_snapshot_bins(profile, snapshot_selector)
    tasks = [
        (si, spec, b) for si, spec in enumerate(specs) for b in bins
    ]

    def run_pair(si, spec, b):
        snap, _ = snapshot_case(case, grid_config, float(profile.p_total[b]))
        events = resolve_events(snap, grid_config, spec)
        results = {}
        for cfg in (grid_config, ies_config):
            res = run_contingency(
                case, profile, b, cfg, spec, simcfg, events=events
            )
            results[cfg.kind] = res
        ev_a = results["grid_only"].event_log
        ev_b = results["with_ies"].event_log
        if ev_a != ev_b:
            raise ScenarioError("paired runs consumed different event lists")
        return ComparisonPair(
            scenario_id=f"{spec.kind}_s{spec.rng_seed}_bin{b}",
            snapshot_bin=b,
            events=ev_a,
            grid_only=extract_metrics(
                results["grid_only"], spec.t_apply, ies_config.dc_bus
            ),
            with_ies=extract_metrics(
                results["with_ies"], spec.t_apply, ies_config.dc_bus
            ),
        )

    pairs: list[ComparisonPair] = []
    failed: list[dict] = []
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as ex:
            futs = [ex.submit(run_pair, *t) for t in tasks]
            outcomes = []
            for (si, spec, b), fut in zip(tasks, futs):
                try:
                    outcomes.append(fut.result())
                except (ScenarioError, dyn.SimulationError) as exc:
                    outcomes.append((si, spec, b, str(exc)))
            for oc in outcomes:
                if isinstance(oc, ComparisonPair):
                    pairs.append(oc)
                else:
                    si, spec, b, msg = oc
                    failed.append(
                        {"scenario": f"{spec.kind}_s{spec.rng_seed}_bin{b}", "error": msg}
                    )
    else:
        for si, spec, b in tasks:
            try:
                pairs.append(run_pair(si, spec, b))
            except (ScenarioError, dyn.SimulationError) as exc:
                failed.append(
                    {"scenario": f"{spec.kind}_s{spec.rng_seed}_bin{b}", "error": str(exc)}
                )
    return ComparisonReport(pairs=pairs, failed=failed)
