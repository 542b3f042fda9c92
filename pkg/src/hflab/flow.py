"""Heat flow driving a flat connection toward a harmonic configuration.

The flow evolves the coefficients by ``dA/dt = -D(tau)`` where
``tau = -sum_i (d_i psi_i + [U_i, psi_i])`` is the metric divergence of the
self-adjoint part of the connection (the negative energy gradient), and
``D(tau)_i = d_i tau + [A_i, tau]``.  Along exact solutions the energy
``E = mean |psi|^2_K`` obeys ``dE/dt = -2 ||tau||^2_{L2}``; the discrete
spatial operators reproduce this identity exactly (summation by parts is
exact on the periodic grid with one shared central stencil), so any defect
is a pure time-discretization error.  That makes the identity the primary
integrator check, and the step controller enforces it:

* a step is accepted only if the energy did not increase, the step-doubling
  error estimate passes, and ``|dE/dt + 2||tau||^2|`` stays below a relative
  budget; otherwise dt halves (at most ``max_halvings`` times);
* dE is computed in a cancellation-free product form so the controller
  still resolves energy drops of order 1e-25 when the flow has almost
  converged (relevant: non-semisimple data decays only algebraically, so
  runs are pushed to very large flow times with dt growing ~ t).

An optional gauge transformation sigma(t) with ``dsigma/dt = tau sigma`` is
integrated jointly (same Runge-Kutta stages), so that
``gauge_apply(sigma(t), A(0)) ~ A(t)`` up to a reported coupling defect.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import linalg
from .bundle import (
    ConnectionField,
    GaugeField,
    central_diff,
    flatness_residual,
    gauge_apply,
)
from .errors import FlowFailure, ValidationError
from .linalg import adjoint_wrt

__all__ = [
    "FlowConfig",
    "FlowState",
    "MonitorSeries",
    "RunStats",
    "FlowResult",
    "tension",
    "energy",
    "flow_step",
    "gauge_step",
    "run_flow",
    "bochner_residual",
]

_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class FlowConfig:
    """Integration parameters.

    ``dt_init=None`` picks ``0.5 * min(spacing)^2``, safely inside the
    explicit stability region for the diffusive part.  ``min_time`` forces
    integration up to that time even if the tension is already below the
    stopping tolerance (useful for stationarity tests).
    """

    dt_init: float | None = None
    t_max: float = 200.0
    tol_tension: float = 1e-6
    tol_energy_slope: float = 0.04
    drift_budget: float = 1e-6
    integrator: str = "rk4"
    record_every: int = 1
    min_time: float = 0.0
    init_flatness_tol: float = 1e-8
    track_gauge: bool = False
    keep_states: bool = False
    max_halvings: int = 40
    dt_min: float = 1e-12
    growth: float = 1.5
    err_rtol: float = 1e-7
    err_atol: float = 1e-12

    def __post_init__(self):
        if self.dt_init is not None and self.dt_init <= 0.0:
            raise ValidationError("dt_init must be positive")
        if self.tol_tension <= 0.0:
            raise ValidationError("tol_tension must be positive")
        if self.integrator not in ("rk4", "euler"):
            raise ValidationError(f"unknown integrator {self.integrator!r}")
        if self.record_every < 1:
            raise ValidationError("record_every must be >= 1")


@dataclass(frozen=True)
class FlowState:
    """Snapshot of the flow: time, connection, optional gauge, step size."""

    t: float
    A: ConnectionField
    sigma: np.ndarray | None
    dt: float


class MonitorSeries:
    """Time series of the runtime monitors, one row per recorded time."""

    COLUMNS = ("t", "energy", "tension_l2", "tension_sup", "psi_sup",
               "flatness", "energy_identity_defect")

    def __init__(self):
        self.rows = []

    def append(self, *values):
        if len(values) != len(self.COLUMNS):
            raise ValueError("monitor row has wrong arity")
        if self.rows and not values[0] > self.rows[-1][0]:
            raise ValueError("monitor timestamps must increase strictly")
        self.rows.append(tuple(float(v) for v in values))

    def column(self, name):
        i = self.COLUMNS.index(name)
        return np.array([r[i] for r in self.rows])

    def __len__(self):
        return len(self.rows)

    def to_csv(self, fh, header=True):
        if header:
            fh.write(",".join(self.COLUMNS) + "\n")
        for row in self.rows:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


@dataclass
class RunStats:
    n_accepted: int = 0
    n_rejected: int = 0
    max_energy_increase: float = 0.0
    max_defect_ratio: float = 0.0
    defect_ratio_weighted: float = 0.0
    time_integrated: float = 0.0
    sign_probe: float = 0.0
    final_coupling_defect: float | None = None
    wall_time: float = 0.0

    @property
    def mean_defect_ratio(self):
        if self.time_integrated == 0.0:
            return 0.0
        return self.defect_ratio_weighted / self.time_integrated


@dataclass
class FlowResult:
    state: FlowState
    monitors: MonitorSeries
    termination: str
    stats: RunStats
    trajectory: list | None = None


# ---------------------------------------------------------------------------
# pointwise operators


def _split_raw(coeffs, K):
    sa = 0.5 * (coeffs + adjoint_wrt(coeffs, K))
    return coeffs - sa, sa


def _tension_raw(coeffs, grid, K, parts=None):
    U, psi = parts if parts is not None else _split_raw(coeffs, K)
    sp = grid.spacing
    tau = np.zeros_like(psi[0])
    for i in range(grid.ndirs):
        tau -= central_diff(psi[i], i, sp[i]) + U[i] @ psi[i] - psi[i] @ U[i]
    return tau


def tension(A, K):
    """Divergence of the self-adjoint part; K-self-adjoint, zero iff harmonic."""
    return _tension_raw(A.coeffs, A.grid, K)


def _norm_sq_field(M, K):
    return np.real(np.einsum("...ij,...ji->...", M, adjoint_wrt(M, K)))


def energy(A, K):
    """Mean over the grid of |psi|^2_K (the base volume is 1)."""
    _, psi = _split_raw(A.coeffs, K)
    return float(np.sum(_norm_sq_field(psi, K)) / A.grid.npoints)


def _delta_energy(psi_new, psi_old, K, npoints):
    # |a|^2 - |b|^2 = Re<a-b, a+b>; the difference cancels shared digits
    # exactly, keeping the result accurate when the change is tiny.
    d = psi_new - psi_old
    s = psi_new + psi_old
    val = np.einsum("...ij,...ji->...", d, adjoint_wrt(s, K)).sum()
    return float(np.real(val)) / npoints


def _tension_norms(tau, K, npoints):
    ns = _norm_sq_field(tau, K)
    return float(np.sum(ns) / npoints), float(np.sqrt(np.max(ns)))


def _psi_sup(psi, K):
    ns = np.sum(_norm_sq_field(psi, K), axis=0)
    return float(np.sqrt(np.max(ns)))


# ---------------------------------------------------------------------------
# time stepping


def _rhs(coeffs, grid, K, tau=None):
    if tau is None:
        tau = _tension_raw(coeffs, grid, K)
    sp = grid.spacing
    dA = np.empty_like(coeffs)
    for i in range(grid.ndirs):
        dA[i] = -(central_diff(tau, i, sp[i]) + coeffs[i] @ tau - tau @ coeffs[i])
    return dA, tau


def _step_once(coeffs, sigma, dt, grid, K, integrator, tau0=None):
    k1, tau1 = _rhs(coeffs, grid, K, tau=tau0)
    if integrator == "euler":
        A1 = coeffs + dt * k1
        s1 = None if sigma is None else sigma + dt * (tau1 @ sigma)
        return A1, s1
    g1 = None if sigma is None else tau1 @ sigma
    A2 = coeffs + (0.5 * dt) * k1
    k2, tau2 = _rhs(A2, grid, K)
    g2 = None if sigma is None else tau2 @ (sigma + (0.5 * dt) * g1)
    A3 = coeffs + (0.5 * dt) * k2
    k3, tau3 = _rhs(A3, grid, K)
    g3 = None if sigma is None else tau3 @ (sigma + (0.5 * dt) * g2)
    A4 = coeffs + dt * k3
    k4, tau4 = _rhs(A4, grid, K)
    g4 = None if sigma is None else tau4 @ (sigma + dt * g3)
    Anew = coeffs + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    snew = None
    if sigma is not None:
        snew = sigma + (dt / 6.0) * (g1 + 2.0 * g2 + 2.0 * g3 + g4)
    return Anew, snew


def gauge_step(state, tau, dt):
    """One explicit Euler update of the gauge flow: sigma <- (I + dt tau) sigma."""
    if state.sigma is None:
        raise ValidationError("gauge tracking is not enabled on this state")
    sig = state.sigma + dt * (tau @ state.sigma)
    return GaugeField(state.A.grid, state.A.rank, sig)


@dataclass
class StepInfo:
    dt: float
    delta_energy: float
    defect: float
    defect_ratio: float
    rejections: int


def flow_step(state, K, cfg, _pre=None):
    """Advance by one accepted step; returns (new_state, StepInfo).

    Acceptance requires, in this order of likeliness to fail: the
    step-doubling error estimate within tolerance, a non-increasing energy,
    and the energy-identity defect within its relative budget.  Rejection
    halves dt; exhausting the cascade raises FlowFailure.
    """
    K = linalg._metric(K, state.A.rank)
    grid = state.A.grid
    A0 = state.A.coeffs
    sig0 = state.sigma
    if _pre is None:
        tau0 = _tension_raw(A0, grid, K)
        l2sq0, _ = _tension_norms(tau0, K, grid.npoints)
    else:
        tau0, l2sq0 = _pre
    _, psi0 = _split_raw(A0, K)
    scale_A = float(np.max(np.abs(A0)))

    dt = min(state.dt, max(cfg.t_max - state.t, cfg.dt_min))
    rejections = 0
    while True:
        if dt < cfg.dt_min:
            raise FlowFailure(
                f"step size underflow at t={state.t:.6g} (dt={dt:.3e})",
                {"t": state.t, "dt": dt, "tension_l2sq": l2sq0},
            )
        A_full, _ = _step_once(A0, None, dt, grid, K, cfg.integrator, tau0=tau0)
        A_mid, sig_mid = _step_once(A0, sig0, 0.5 * dt, grid, K,
                                    cfg.integrator, tau0=tau0)
        A_new, sig_new = _step_once(A_mid, sig_mid, 0.5 * dt, grid, K,
                                    cfg.integrator)
        shrink = 15.0 if cfg.integrator == "rk4" else 1.0
        err = float(np.max(np.abs(A_full - A_new))) / shrink
        tol_err = cfg.err_atol + cfg.err_rtol * scale_A
        _, psi_new = _split_raw(A_new, K)
        dE = _delta_energy(psi_new, psi0, K, grid.npoints)
        defect = abs(dE / dt + 2.0 * l2sq0)
        budget = cfg.tol_energy_slope * 2.0 * l2sq0 + 1e-300
        if err <= tol_err and dE <= 0.0 and defect <= budget:
            break
        dt *= 0.5
        rejections += 1
        if rejections > cfg.max_halvings:
            raise FlowFailure(
                f"step rejection cascade exhausted at t={state.t:.6g}",
                {"t": state.t, "dt": dt, "delta_energy": dE,
                 "defect": defect, "error_estimate": err},
            )

    # next step size: smallest of the error-based and slope-based factors,
    # never more than cfg.growth; Markovian so runs resume deterministically
    if err == 0.0:
        f_err = cfg.growth
    else:
        f_err = min(cfg.growth, max(0.3, 0.9 * (tol_err / err) ** 0.2))
    f_slope = cfg.growth if defect <= 0.5 * budget else 1.0
    dt_next = dt * min(f_err, f_slope)

    ratio = defect / (2.0 * l2sq0) if l2sq0 > 0.0 else 0.0
    new_state = FlowState(
        t=state.t + dt,
        A=state.A.replace_coeffs(A_new),
        sigma=sig_new,
        dt=dt_next,
    )
    return new_state, StepInfo(dt, dE, defect, ratio, rejections)


def _coupling_defect(state, A0, cond_limit=1e12):
    gauged = gauge_apply(state.sigma, A0, cond_limit=cond_limit)
    return float(np.max(np.abs(gauged.coeffs - state.A.coeffs)))


def run_flow(A0, K, cfg, *, t0=0.0, dt0=None, sigma0=None,
             coupling_reference=None):
    """Integrate until the tension sup-norm drops below tolerance or t_max.

    Returns a FlowResult with the final state, the monitor series, the
    termination reason ("converged" or "t_max"), per-run statistics, and,
    when ``cfg.keep_states`` is set, the recorded trajectory.  Integration
    problems (step cascade exhausted, flatness drift beyond budget, energy
    increasing across records) raise FlowFailure.

    When resuming from a checkpoint, pass the original t=0 connection as
    ``coupling_reference`` so the reported gauge-coupling defect keeps its
    meaning (sigma always maps the original connection to the current one).
    """
    wall0 = time.perf_counter()
    K = linalg._metric(K, A0.rank)
    flat0 = flatness_residual(A0)
    if flat0 > cfg.init_flatness_tol:
        raise ValidationError(
            f"initial flatness residual {flat0:.3e} exceeds {cfg.init_flatness_tol:.1e}"
        )
    if dt0 is None:
        dt0 = cfg.dt_init
    if dt0 is None:
        dt0 = 0.5 * min(h * h for h in A0.grid.spacing)
    sigma = sigma0
    if cfg.track_gauge and sigma is None:
        sigma = GaugeField.identity(A0.grid, A0.rank).sigma.copy()
    state = FlowState(t=float(t0), A=A0, sigma=sigma, dt=float(dt0))

    stats = RunStats()
    monitors = MonitorSeries()
    trajectory = [] if cfg.keep_states else None

    # descent-direction self-test: a probe step must not raise the energy
    tau = _tension_raw(state.A.coeffs, A0.grid, K)
    l2sq, sup = _tension_norms(tau, K, A0.grid.npoints)
    if l2sq > 0.0:
        h = min(state.dt, 1e-6 / max(sup, 1.0))
        A_probe, _ = _step_once(state.A.coeffs, None, h, A0.grid, K,
                                "euler", tau0=tau)
        _, psi_probe = _split_raw(A_probe, K)
        _, psi_base = _split_raw(state.A.coeffs, K)
        probe = _delta_energy(psi_probe, psi_base, K, A0.grid.npoints) / h
        stats.sign_probe = probe
        if probe > 0.0:
            raise FlowFailure(
                "energy increases along the flow direction; "
                "sign convention violated", {"probe_dE_dt": probe},
            )

    last_defect = 0.0
    prev_recorded_E = None
    since_record = 0
    termination = None

    def record(E, l2sq, sup, flat, psi_s):
        nonlocal prev_recorded_E
        if monitors.rows and monitors.rows[-1][0] >= state.t:
            return
        if prev_recorded_E is not None:
            slack = 8.0 * _EPS * max(1.0, abs(prev_recorded_E))
            if E > prev_recorded_E + slack:
                raise FlowFailure(
                    f"energy increased across records at t={state.t:.6g}",
                    {"previous": prev_recorded_E, "current": E},
                )
        prev_recorded_E = E
        monitors.append(state.t, E, np.sqrt(l2sq), sup, psi_s, flat, last_defect)
        if trajectory is not None:
            trajectory.append(state)

    while True:
        tau = _tension_raw(state.A.coeffs, A0.grid, K)
        l2sq, sup = _tension_norms(tau, K, A0.grid.npoints)
        _, psi = _split_raw(state.A.coeffs, K)
        E = float(np.sum(_norm_sq_field(psi, K)) / A0.grid.npoints)
        flat = flatness_residual(state.A)
        if flat - flat0 > cfg.drift_budget:
            raise FlowFailure(
                f"flatness drift {flat - flat0:.3e} exceeds budget "
                f"{cfg.drift_budget:.1e} at t={state.t:.6g}",
                {"t": state.t, "flatness": flat, "initial": flat0},
            )
        due = since_record == 0
        if state.t >= cfg.min_time and sup < cfg.tol_tension:
            termination = "converged"
        elif state.t >= cfg.t_max * (1.0 - 1e-14):
            termination = "t_max"
        if due or termination:
            record(E, l2sq, sup, flat, _psi_sup(psi, K))
        if termination:
            break

        state, info = flow_step(state, K, cfg, _pre=(tau, l2sq))
        last_defect = info.defect
        stats.n_accepted += 1
        stats.n_rejected += info.rejections
        stats.max_energy_increase = max(stats.max_energy_increase,
                                        info.delta_energy)
        stats.max_defect_ratio = max(stats.max_defect_ratio, info.defect_ratio)
        stats.defect_ratio_weighted += info.defect_ratio * info.dt
        stats.time_integrated += info.dt
        since_record = (since_record + 1) % cfg.record_every

        if state.sigma is not None and stats.n_accepted % 64 == 0:
            worst = float(np.max(np.linalg.cond(state.sigma)))
            if not np.isfinite(worst) or worst > 1e10:
                warnings.warn("gauge tracking disabled: sigma condition "
                              f"number {worst:.3e}", RuntimeWarning)
                state = replace(state, sigma=None)

    if state.sigma is not None:
        try:
            ref = coupling_reference if coupling_reference is not None else A0
            stats.final_coupling_defect = _coupling_defect(state, ref)
        except Exception:  # conditioning only affects the diagnostic
            stats.final_coupling_defect = None
    stats.wall_time = time.perf_counter() - wall0
    return FlowResult(state=state, monitors=monitors, termination=termination,
                      stats=stats, trajectory=trajectory)


# ---------------------------------------------------------------------------
# gauge-change identity residual


def bochner_residual(sigma, A, K, return_pointwise=False):
    """Discrete defect of the integrated gauge-change identity.

    With tau' the tension of the gauged connection, h = sigma^{*K} sigma and
    s = log h, the continuum identity

        <sigma^-1 tau' sigma - tau, s>_K
            = 1/4 Lap |s|^2_K - 1/2 <D(h) h^-1, D(s)>_K

    holds pointwise (D is the flat connection acting on endomorphisms).
    This returns |mean(LHS) - mean(RHS)| over the grid, which converges to
    zero at second order for smooth gauge fields; with ``return_pointwise``
    the |LHS - RHS| field is returned as well.
    """
    if not isinstance(sigma, GaugeField):
        sigma = GaugeField(A.grid, A.rank, sigma)
    K = linalg._metric(K, A.rank)
    grid = A.grid
    sp = grid.spacing

    tau = tension(A, K)
    gauged = gauge_apply(sigma, A)
    tau_g = tension(gauged, K)
    sig = sigma.sigma
    sig_inv = np.linalg.inv(sig)

    h = sigma.h(K)
    s = sigma.log_h(K)
    h_inv = np.linalg.inv(h)

    lhs = np.trace((sig_inv @ tau_g @ sig - tau) @ s, axis1=-2, axis2=-1)

    s_sq = np.real(np.trace(s @ s, axis1=-2, axis2=-1))
    lap = np.zeros_like(s_sq)
    rhs_inner = np.zeros_like(lhs)
    for i in range(grid.ndirs):
        lap += central_diff(central_diff(s_sq, i, sp[i]), i, sp[i])
        Ai = A.coeffs[i]
        Dh = central_diff(h, i, sp[i]) + Ai @ h - h @ Ai
        Ds = central_diff(s, i, sp[i]) + Ai @ s - s @ Ai
        rhs_inner += np.trace((Dh @ h_inv) @ adjoint_wrt(Ds, K),
                              axis1=-2, axis2=-1)
    rhs = 0.25 * lap - 0.5 * rhs_inner

    residual = float(abs(np.mean(lhs) - np.mean(rhs)))
    if return_pointwise:
        return residual, np.abs(lhs - rhs)
    return residual
