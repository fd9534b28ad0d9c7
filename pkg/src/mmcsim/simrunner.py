"""Fixed-step closed-loop execution, trace recording, trips and batch runs."""
from __future__ import annotations

import enum
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernel as K
from .control import ControlConfig, initial_controller_state, notch_coefficients
from .phasors import SequenceSet, extract_phasor, fortescue, ThreePhase
from .plant import PlantParams
from .refcalc import DET_DELTA, SVD_RTOL, MethodId
from .scenario import ScenarioSpec

#: Trace CSV column order (matches the kernel trace layout).
TRACE_COLUMNS = (
    "t",
    "i_s_a", "i_s_b", "i_s_c",
    "i_sum_a", "i_sum_b", "i_sum_c",
    "i_dc",
    "u_u_a", "u_u_b", "u_u_c",
    "u_l_a", "u_l_b", "u_l_c",
    "e_u_a", "e_u_b", "e_u_c",
    "e_l_a", "e_l_b", "e_l_c",
    "e_vert_a", "e_vert_b", "e_vert_c",
    "u_diff0dc", "det_m",
    "singular_flag", "sat_arm_flag", "sat_u0dc_flag", "trip_flag",
)

DT_DEFAULT = 50e-6
DECIMATION_DEFAULT = 20
#: Trip thresholds: sustained arm overcurrent, arm energy bounds (x nominal).
I_TRIP = 2.0
TRIP_SUSTAIN_S = 1e-3
ENERGY_BOUNDS = (0.5, 1.5)
#: Settling metric: all |E_vert| below this fraction of the nominal arm
#: energy, held for the hold time.
SETTLE_FRACTION = 0.02
SETTLE_HOLD_S = 0.5


class TripCause(enum.Enum):
    NONE = "none"
    OVERCURRENT = "overcurrent"
    ENERGY_BOUND = "energy_bound"
    NUMERICAL_DIVERGENCE = "numerical_divergence"


_CAUSE_FROM_CODE = {
    K.TRIP_NONE: TripCause.NONE,
    K.TRIP_OVERCURRENT: TripCause.OVERCURRENT,
    K.TRIP_ENERGY: TripCause.ENERGY_BOUND,
    K.TRIP_NONFINITE: TripCause.NUMERICAL_DIVERGENCE,
}


@dataclass
class RunResult:
    scenario: str
    method: MethodId
    tripped: bool
    trip_time: float | None
    trip_cause: TripCause
    e_vert_end: tuple[float, float, float]
    max_abs_u0dc: float
    u0dc_sat_duty: float
    settling_time: float | None
    energy_closure_error: float
    trace: np.ndarray = field(repr=False)
    dt: float = DT_DEFAULT
    decimation: int = DECIMATION_DEFAULT

    @property
    def columns(self) -> tuple[str, ...]:
        return TRACE_COLUMNS

    def column(self, name: str) -> np.ndarray:
        return self.trace[:, TRACE_COLUMNS.index(name)]


def _steady_state_vector(plant: PlantParams, config: ControlConfig,
                         spec: ScenarioSpec) -> np.ndarray:
    """Balanced pre-fault operating point as the initial plant state."""
    iref, _, _ = K.grid_current_ref(spec.p_set, spec.q_set,
                                    complex(spec.prefault.pos), 0.01,
                                    config.i_ref_max, 0.0j)
    iref = complex(iref)
    y = np.zeros(K.NSTATE)
    shifts = (0.0, -2.0 * math.pi / 3.0, 2.0 * math.pi / 3.0)
    for k, ak in enumerate(shifts):
        v = math.sqrt(2.0) * (iref * complex(math.cos(ak), math.sin(ak))).real
        if k < 2:
            y[k] = v
    g = config.gains(plant)
    p_ff = 3.0 * ((spec.prefault.pos * iref.conjugate()).real
                  + g["r_eq"] * abs(iref)**2)
    i_dc0 = p_ff / 3.0 / plant.u_dc_pu
    loss = 3.0 * g["r_arm2"] * i_dc0**2
    i_dc = (p_ff + loss) / 3.0 / plant.u_dc_pu
    y[2:5] = i_dc
    y[5:11] = plant.e_arm_nominal
    return y


def trip_sustain_samples(dt: float, decimation: int) -> int:
    """Consecutive logged samples an overcurrent must persist to trip."""
    return max(2, int(round(TRIP_SUSTAIN_S / (dt * decimation))) + 1)


def energy_window_samples(dt: float, decimation: int, f0: float = 50.0) -> int:
    """Logged samples in one fundamental period (energy-bound averaging)."""
    return max(1, int(round(1.0 / (f0 * dt * decimation))))


def run(spec: ScenarioSpec, dt: float = DT_DEFAULT,
        decimation: int = DECIMATION_DEFAULT,
        plant: PlantParams | None = None,
        config: ControlConfig | None = None) -> RunResult:
    """Advance the closed loop over the scenario and collect the trace."""
    if dt > 100e-6 or dt < 1e-6:
        raise ValueError(f"dt {dt} outside [1, 100] microseconds")
    plant = plant or PlantParams()
    config = config or ControlConfig()
    if spec.arm_scale_u != (1.0,) * 3 or spec.arm_scale_l != (1.0,) * 3:
        plant = plant.with_arm_scales(spec.arm_scale_u, spec.arm_scale_l)

    pp = plant.kernel_array()
    a_inv = plant.circuit_matrix_inverse()
    cp = config.kernel_array(plant)
    rp = np.array([plant.z_arm_nominal.r, plant.z_arm_nominal.x,
                   plant.z_eq.r, plant.z_eq.x, DET_DELTA, SVD_RTOL])

    nc50 = notch_coefficients(50.0, config.notch_bandwidth_hz, dt)
    nc100 = notch_coefficients(100.0, config.notch_bandwidth_hz, dt)
    p_f, q_f = spec.fault_setpoints
    sched = np.concatenate((
        [spec.t_fault, spec.t_clear, spec.p_set, spec.q_set, p_f, q_f],
        nc50, nc100))

    grid_pre = np.array([spec.prefault.pos, spec.prefault.neg,
                         spec.prefault.zero], dtype=complex)
    grid_fault = np.array([spec.fault.pos, spec.fault.neg,
                           spec.fault.zero], dtype=complex)

    y = _steady_state_vector(plant, config, spec)
    cs, rs = initial_controller_state(plant, config, complex(spec.prefault.pos),
                                      spec.p_set, spec.q_set, dt)

    n_steps = int(round(spec.duration / dt))
    n_rows = n_steps // decimation + 1
    trace = np.zeros((n_rows, K.TR_NCOLS))
    consec = trip_sustain_samples(dt, decimation)
    e_lo = ENERGY_BOUNDS[0] * plant.e_arm_nominal
    e_hi = ENERGY_BOUNDS[1] * plant.e_arm_nominal

    rows, tripped, cause_code, trip_time = K.run_loop(
        y, cs, rs, cp, rp, pp, a_inv, int(spec.method),
        grid_pre, grid_fault, sched,
        dt, n_steps, decimation, I_TRIP, consec, e_lo, e_hi,
        energy_window_samples(dt, decimation), trace)

    trace = trace[:rows]
    return _build_result(spec, trace, tripped, cause_code, trip_time, y,
                         plant, dt, decimation)


def _build_result(spec, trace, tripped, cause_code, trip_time, y_final,
                  plant, dt, decimation) -> RunResult:
    cause = _CAUSE_FROM_CODE[int(cause_code)]
    t = trace[:, K.TR_T]
    u0 = trace[:, K.TR_U0DC]
    sat = trace[:, K.TR_SAT_U0]

    in_fault = (t >= spec.t_fault) & (t < spec.t_clear)
    sat_duty = float(np.mean(sat[in_fault])) if np.any(in_fault) else 0.0

    e_vert_end = tuple(float(v) for v in trace[-1, K.TR_EVERT:K.TR_EVERT + 3])

    settle = None
    if not tripped:
        after = t >= spec.t_clear
        if np.any(after):
            ev = np.abs(trace[:, K.TR_EVERT:K.TR_EVERT + 3]).max(axis=1)
            bound = SETTLE_FRACTION * plant.e_arm_nominal
            ok = (ev < bound) & after
            hold = max(1, int(round(SETTLE_HOLD_S / (dt * decimation))))
            idx = _first_sustained(ok, hold)
            if idx is not None:
                settle = float(t[idx])

    # energy bookkeeping: states 11..13 accumulate DC input, AC output, loss
    de = float(np.sum(y_final[5:11]) - 6.0 * plant.e_arm_nominal)
    closure = de - (y_final[11] - y_final[12] - y_final[13])
    throughput = abs(y_final[11]) + 1e-12
    closure_rel = abs(closure) / throughput

    return RunResult(
        scenario=spec.name,
        method=spec.method,
        tripped=bool(tripped),
        trip_time=float(trip_time) if tripped else None,
        trip_cause=cause,
        e_vert_end=e_vert_end,
        max_abs_u0dc=float(np.max(np.abs(u0))) if len(u0) else 0.0,
        u0dc_sat_duty=sat_duty,
        settling_time=settle,
        energy_closure_error=float(closure_rel),
        trace=trace,
        dt=dt,
        decimation=decimation,
    )


def _first_sustained(mask: np.ndarray, hold: int):
    """Index of the first True that starts a run of at least ``hold`` Trues."""
    count = 0
    for i, v in enumerate(mask):
        count = count + 1 if v else 0
        if count >= hold:
            return i - hold + 1
    return None


def evaluate_trips(trace: np.ndarray, dt: float, decimation: int,
                   e_arm_nominal: float):
    """Offline re-evaluation of the trip monitor on a recorded trace.

    Returns (trip_time or None, TripCause); reproduces the in-run decision
    exactly because the monitor operates at the logged cadence.
    """
    consec = trip_sustain_samples(dt, decimation)
    e_win = energy_window_samples(dt, decimation)
    e_lo = ENERGY_BOUNDS[0] * e_arm_nominal
    e_hi = ENERGY_BOUNDS[1] * e_arm_nominal
    oc = 0
    e_hist = []
    for i in range(trace.shape[0]):
        i_s = trace[i, K.TR_IS:K.TR_IS + 3]
        i_sum = trace[i, K.TR_ISUM:K.TR_ISUM + 3]
        e_all = np.concatenate((trace[i, K.TR_EU:K.TR_EU + 3],
                                trace[i, K.TR_EL:K.TR_EL + 3]))
        state = np.concatenate((i_s, i_sum, e_all))
        if not np.all(np.isfinite(state)):
            return float(trace[i, K.TR_T]), TripCause.NUMERICAL_DIVERGENCE
        i_arm = max(np.max(np.abs(0.5 * i_s + i_sum)),
                    np.max(np.abs(-0.5 * i_s + i_sum)))
        oc = oc + 1 if i_arm > I_TRIP else 0
        if oc >= consec:
            return float(trace[i, K.TR_T]), TripCause.OVERCURRENT
        # running one-period mean, same update order as the in-run monitor
        if not e_hist:
            e_hist = [np.zeros((6, e_win)), np.zeros(6), 0]
        ebuf, esum, ecount = e_hist
        slot = i % e_win
        for k in range(6):
            if ecount >= e_win:
                esum[k] -= ebuf[k, slot]
            ebuf[k, slot] = e_all[k]
            esum[k] += e_all[k]
        ecount += 1
        e_hist[2] = ecount
        nsamp = min(ecount, e_win)
        if np.any(esum / nsamp < e_lo) or np.any(esum / nsamp > e_hi):
            return float(trace[i, K.TR_T]), TripCause.ENERGY_BOUND
    return None, TripCause.NONE


# --- trace analysis helpers ------------------------------------------------------


def trace_window(result: RunResult, t_start: float, t_end: float) -> np.ndarray:
    t = result.column("t")
    return result.trace[(t >= t_start) & (t < t_end)]


def window_phasor(result: RunResult, column: str, t_end: float,
                  f0: float = 50.0):
    """RMS phasor of a trace column over the fundamental period ending at
    ``t_end`` (the logging rate must divide the period)."""
    dt_log = result.dt * result.decimation
    n = int(round(1.0 / (f0 * dt_log)))
    t = result.column("t")
    idx = np.searchsorted(t, t_end) - 1
    if idx - n + 1 < 0:
        raise ValueError("trace too short for the requested window")
    window = result.column(column)[idx - n + 1:idx + 1]
    return extract_phasor(window, 2.0 * math.pi * f0, dt_log)


def window_sequences(result: RunResult, base: str, t_end: float) -> SequenceSet:
    """Sequence phasors of a three-phase trace quantity (columns base_a/b/c)."""
    ph = [window_phasor(result, f"{base}_{p}", t_end) for p in "abc"]
    return fortescue(ThreePhase(*ph))


# --- CSV output -------------------------------------------------------------------


def format_float(v: float) -> str:
    return "%.17g" % v


def trace_to_csv(result: RunResult, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for row in result.trace:
            fh.write(",".join(format_float(v) for v in row) + "\n")


RESULT_FIELDS = ("scenario", "method", "tripped", "trip_time", "trip_cause",
                 "e_vert_end_a", "e_vert_end_b", "e_vert_end_c",
                 "max_abs_u0dc", "u0dc_sat_duty", "settling_time",
                 "energy_closure_error")


def result_row(result: RunResult) -> list[str]:
    return [
        result.scenario,
        result.method.name,
        "1" if result.tripped else "0",
        format_float(result.trip_time) if result.trip_time is not None else "",
        result.trip_cause.value,
        format_float(result.e_vert_end[0]),
        format_float(result.e_vert_end[1]),
        format_float(result.e_vert_end[2]),
        format_float(result.max_abs_u0dc),
        format_float(result.u0dc_sat_duty),
        format_float(result.settling_time) if result.settling_time is not None else "",
        format_float(result.energy_closure_error),
    ]


def results_to_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(RESULT_FIELDS) + "\n")
        for r in results:
            fh.write(",".join(result_row(r)) + "\n")


# --- batch ------------------------------------------------------------------------


def max_parallelism() -> int:
    env = os.environ.get("MMC_SIM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def batch(specs, methods, dt: float = DT_DEFAULT,
          decimation: int = DECIMATION_DEFAULT,
          plant: PlantParams | None = None,
          config: ControlConfig | None = None,
          parallelism: int | None = None) -> list[RunResult]:
    """Run every (scenario, method) cell; results ordered scenario-major.

    Each run is independent and deterministic, so the output is identical
    for any parallelism level.  Per-run errors propagate.
    """
    cells = [(spec, m) for spec in specs for m in methods]
    workers = parallelism or max_parallelism()
    workers = max(1, min(workers, len(cells) or 1))

    def _one(cell):
        spec, method = cell
        return run(spec.with_method(method), dt=dt, decimation=decimation,
                   plant=plant, config=config)

    if workers == 1:
        return [_one(c) for c in cells]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_one, cells))
