"""Forward sensitivity propagation for all three DAE classes: the linear
sensitivity DAE integrated simultaneously with the state, transition-time
sensitivities, sensitivity jumps at transitions, and forward accumulation of
dG/dp including the moving-boundary terms of the functional."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import integrate as _int
from . import model as _m
from .errors import GrazingEvent, SingularTransition
from .integrate import DaeSystem, ForwardResult, State, Tolerances
from .model import DaeClass, HybridSystemSpec, ModeDynamics, Point

__all__ = [
    "SensitivityBundle",
    "FsaResult",
    "fsa_rhs",
    "transition_time_sensitivity",
    "fsa_jump",
    "run_fsa",
]


@dataclass
class SensitivityBundle:
    """Sensitivity state of a forward run.

    ``s`` (n_y, n_p) and ``w`` (n_z, n_p) are the differential and algebraic
    state sensitivities, ``taus`` the transition-time sensitivities in
    transition order, ``s_star``/``w_star`` the memory sensitivities frozen
    per mode, and ``grad_quad`` the running integral of
    g_y s + g_z w + g_p plus the accumulated boundary terms.
    """

    s: np.ndarray
    w: np.ndarray
    sdot: np.ndarray
    taus: list = field(default_factory=list)
    s_star: Optional[np.ndarray] = None
    w_star: Optional[np.ndarray] = None
    grad_quad: Optional[np.ndarray] = None


@dataclass
class FsaResult:
    """Forward run with sensitivities: dense traces, per-transition
    sensitivity data, the functional G and its gradient."""

    forward: ForwardResult
    bundle: SensitivityBundle
    taus: list
    jumps: list
    G: float
    dGdp: np.ndarray

    @property
    def traces(self):
        return self.forward.traces

    @property
    def transitions(self):
        return self.forward.transitions


def fsa_rhs(dyn: ModeDynamics, point: Point, sdot, s, w,
            s_star=None, w_star=None):
    """Residual rows of the sensitivity system at one point:
    F_ydot sdot + F_y s + F_z w + F_p (+ memory coupling when given)."""
    a = (point.ydot, point.y, point.z, point.ystar, point.zstar, point.p,
         point.t)
    fyd, fy, fz = _m.eval_state_partials(dyn, *a)
    fp, fys, fzs = _m.eval_forcing_partials(dyn, *a)
    r = fyd @ sdot + fy @ s + fz @ w + fp
    if s_star is not None:
        r = r + fys @ s_star
    if w_star is not None:
        r = r + fzs @ w_star
    return r


def sdot_from_residual(dyn: ModeDynamics, point: Point, s, w,
                       s_star=None, w_star=None):
    """sdot solving the sensitivity rows given (s, w); unique because F_ydot
    has full column rank for the supported classes."""
    a = (point.ydot, point.y, point.z, point.ystar, point.zstar, point.p,
         point.t)
    fyd, fy, fz = _m.eval_state_partials(dyn, *a)
    fp, fys, fzs = _m.eval_forcing_partials(dyn, *a)
    rhs = -(fy @ s + fz @ w + fp)
    if s_star is not None:
        rhs = rhs - fys @ s_star
    if w_star is not None:
        rhs = rhs - fzs @ w_star
    sol, *_ = np.linalg.lstsq(fyd, rhs, rcond=None)
    return sol


def transition_time_sensitivity(guard, point: Point, s, w, yddot, zdot,
                                sdot=None, drift=None, grazing_rtol=1e-8):
    """Transition-time sensitivity tau (n_p,) from the differentiated guard:

        h_ydot (sdot + yddot tau) + h_y (s + ydot tau)
            + h_z (w + zdot tau) + h_t tau + h_p = 0

    Raises :class:`GrazingEvent` when the drift (the tau coefficient) is not
    bounded away from zero.
    """
    h_ydot, h_y, h_z, h_p, h_t = _m.guard_partials(guard, point)
    if drift is None:
        drift = float(h_ydot @ yddot + h_y @ point.ydot + h_z @ zdot + h_t)
    scale = 1.0 + abs(h_ydot @ yddot) + abs(h_y @ point.ydot) \
        + abs(h_z @ zdot) + abs(h_t)
    if abs(drift) <= grazing_rtol * scale:
        raise GrazingEvent(f"guard drift {drift:.3e} vanishes at t={point.t}")
    num = h_y @ s + h_p
    if w.size:
        num = num + h_z @ w
    if np.any(h_ydot):
        if sdot is None:
            raise ValueError("sdot is required when the guard depends on ydot")
        num = num + h_ydot @ sdot
    return -num / drift


# ---------------------------------------------------------------------------
# Jump systems


def fsa_jump(spec: HybridSystemSpec, rec, s_minus, w_minus, tau, p=None,
             sdot_minus=None, memory=None, memory_sens=None):
    """Sensitivities entering the next mode: solves the differentiated
    transition system given the minus-side sensitivities and tau.

    Returns ``(s_plus, w_plus, sdot_plus)``.
    """
    p = np.asarray(p if p is not None else spec.p_nominal, dtype=float)
    if spec.dae_class is DaeClass.HESSENBERG2:
        from . import hi2 as _hi2
        return _hi2.hi2_fsa_jump(spec, rec, s_minus, w_minus, tau, p)
    if spec.dae_class is DaeClass.INDEX1_MEMORY:
        return _jump_memory(spec, rec, s_minus, w_minus, tau, p, sdot_minus,
                            memory, memory_sens)
    return _jump_fully_implicit(spec, rec, s_minus, w_minus, tau, p,
                                sdot_minus)


def _minus_hidden(spec, rec, p, memory):
    dyn_m = spec.modes[rec.mode_before].dynamics
    ys, zs = memory if memory is not None else (rec.y_minus, rec.z_minus)
    pt_m = Point(rec.ydot_minus, rec.y_minus, rec.z_minus, ys, zs, p, rec.t)
    return _m.compute_hidden_derivatives(dyn_m, pt_m, spec.dae_class)


def _plus_hidden(spec, rec, p):
    dyn_p = spec.modes[rec.mode_after].dynamics
    pt_p = Point(rec.ydot_plus, rec.y_plus, rec.z_plus, rec.y_plus,
                 rec.z_plus, p, rec.t)
    return _m.compute_hidden_derivatives(dyn_p, pt_p, spec.dae_class)


def _jump_fully_implicit(spec, rec, s_minus, w_minus, tau, p, sdot_minus,
                         include_p=True, memory=None):
    n_y, n_z = spec.n_y, spec.n_z
    tmap = spec.modes[rec.mode_before].transition
    dyn_p = spec.modes[rec.mode_after].dynamics
    dyn_m = spec.modes[rec.mode_before].dynamics
    margs = (rec.ydot_minus, rec.y_minus, rec.z_minus)
    pargs = (rec.ydot_plus, rec.y_plus, rec.z_plus)
    if sdot_minus is None:
        pt_m = Point(*margs, rec.y_minus, rec.z_minus, p, rec.t)
        sdot_minus = sdot_from_residual(dyn_m, pt_m, s_minus, w_minus)
    yddot_m, zdot_m = _minus_hidden(spec, rec, p, memory)
    yddot_p, zdot_p = _plus_hidden(spec, rec, p)
    tp = _m.map_partials(tmap, pargs, margs, p, rec.t)
    fyd, fy, fz = _m.eval_state_partials(dyn_p, *pargs, rec.y_plus,
                                         rec.z_plus, p, rec.t)
    fp, _, _ = _m.eval_forcing_partials(dyn_p, *pargs, rec.y_plus,
                                        rec.z_plus, p, rec.t)
    m = np.block([
        [tp["T_ydot_plus"], tp["T_y_plus"], tp["T_z_plus"]],
        [fyd, fy, fz],
    ])
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    tau_row = (tp["T_ydot_plus"] @ yddot_p + tp["T_y_plus"] @ rec.ydot_plus
               + tp["T_z_plus"] @ zdot_p + tp["T_t"])
    top = (np.outer(tau_row, tau)
           + tp["T_ydot_minus"] @ (sdot_minus + np.outer(yddot_m, tau))
           + tp["T_y_minus"] @ (s_minus + np.outer(rec.ydot_minus, tau))
           + tp["T_z_minus"] @ (w_minus + np.outer(zdot_m, tau)))
    bot = np.zeros((n_y + n_z, tau.size))
    if include_p:
        top = top + tp["T_p"]
        bot = bot + fp
    try:
        sol = np.linalg.solve(m, -np.vstack([top, bot]))
    except np.linalg.LinAlgError as exc:
        raise SingularTransition("transition jump matrix singular") from exc
    sdot_plus = sol[:n_y]
    s_plus = sol[n_y:2 * n_y]
    w_plus = sol[2 * n_y:]
    return s_plus, w_plus, sdot_plus


def _jump_memory(spec, rec, s_minus, w_minus, tau, p, sdot_minus, memory,
                 memory_sens, include_p=True):
    n_y, n_z = spec.n_y, spec.n_z
    tmap = spec.modes[rec.mode_before].transition
    dyn_p = spec.modes[rec.mode_after].dynamics
    margs = (rec.ydot_minus, rec.y_minus, rec.z_minus)
    pargs = (rec.ydot_plus, rec.y_plus, rec.z_plus)
    yddot_m, zdot_m = _minus_hidden(spec, rec, p, memory)
    yddot_p, zdot_p = _plus_hidden(spec, rec, p)
    tp = _m.map_partials(tmap, pargs, margs, p, rec.t)
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    if tmap.dim != n_y + n_z:
        raise SingularTransition(
            "memory-class sensitivity jumps require a transition map that "
            "determines both y+ and z+")
    m = np.hstack([tp["T_y_plus"], tp["T_z_plus"]])
    rhs = (np.outer(tp["T_y_plus"] @ rec.ydot_plus
                    + tp["T_z_plus"] @ zdot_p + tp["T_t"], tau)
           + tp["T_y_minus"] @ (s_minus + np.outer(rec.ydot_minus, tau))
           + tp["T_z_minus"] @ (w_minus + np.outer(zdot_m, tau)))
    if np.any(tp["T_ydot_minus"]):
        if sdot_minus is None:
            raise ValueError("sdot_minus required for ydot-dependent maps")
        rhs = rhs + tp["T_ydot_minus"] @ (sdot_minus + np.outer(yddot_m, tau))
    if include_p:
        rhs = rhs + tp["T_p"]
    try:
        sol = np.linalg.solve(m, -rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularTransition("transition jump matrix singular") from exc
    s_plus = sol[:n_y]
    w_plus = sol[n_y:]
    # in-mode derivative with memory tied to the new mode's frozen values
    s_star = s_plus + np.outer(rec.ydot_plus, tau)
    w_star = w_plus + np.outer(zdot_p, tau)
    a = (*pargs, rec.y_plus, rec.z_plus, p, rec.t)
    fyd, fy, fz = _m.eval_state_partials(dyn_p, *a)
    fp, fys, fzs = _m.eval_forcing_partials(dyn_p, *a)
    rhs2 = -(fy @ s_plus + fz @ w_plus + fp + fys @ s_star + fzs @ w_star)
    sdot_plus, *_ = np.linalg.lstsq(fyd, rhs2, rcond=None)
    return s_plus, w_plus, sdot_plus


# ---------------------------------------------------------------------------
# Augmented system adapter and run state


class FsaSystem(DaeSystem):
    """State + sensitivity columns + quadratures [G, grad integrand]."""

    def __init__(self, dyn, p, ystar, zstar, s_star, w_star, n_y, n_z, quad,
                 memory_class):
        self.dyn = dyn
        self.p = p
        self.ystar = ystar
        self.zstar = zstar
        self.s_star = s_star
        self.w_star = w_star
        self.ny = n_y
        self.nz = n_z
        self.nlin = p.size
        self.nq = 1 + p.size
        self.quad = quad
        self.memory_class = memory_class

    def residual(self, ydot, y, z, t):
        return np.asarray(self.dyn.residual(ydot, y, z, self.ystar,
                                            self.zstar, self.p, t),
                          dtype=float)

    def jac(self, ydot, y, z, t):
        return _m.eval_state_partials(self.dyn, ydot, y, z, self.ystar,
                                      self.zstar, self.p, t)

    def lin_forcing(self, ydot, y, z, t):
        fp, fys, fzs = _m.eval_forcing_partials(self.dyn, ydot, y, z,
                                                self.ystar, self.zstar,
                                                self.p, t)
        if self.memory_class:
            fp = fp + fys @ self.s_star + fzs @ self.w_star
        return fp

    def quad_rhs(self, ydot, y, z, t, S, W):
        out = np.empty(self.nq)
        out[0] = self.quad.g(y, z, self.p, t)
        g_y, g_z, g_p = _m.quad_partials(self.quad, y, z, self.p, t)
        grad = g_y @ S + g_p
        if self.nz:
            grad = grad + g_z @ W
        out[1:] = grad
        return out


class FsaRunState:
    """Mutable sensitivity workspace threaded through the forward driver."""

    def __init__(self, S, W, Sdot, s_star, w_star, n_p):
        self.S = S
        self.W = W
        self.Sdot = Sdot
        self.s_star = s_star
        self.w_star = w_star
        self.taus = []
        self.jumps = []
        self.grad_leibniz = np.zeros(n_p)

    @classmethod
    def initialize(cls, spec, st: State, memory, p, tol):
        n_y, n_z, n_p = spec.n_y, spec.n_z, p.size
        if spec.dae_class is DaeClass.HESSENBERG2:
            from . import hi2 as _hi2
            s0, w0, sdot0 = _hi2.hi2_fsa_initial_sensitivities(spec, st,
                                                               spec.t0, p)
            return cls(s0, w0, sdot0, None, None, n_p)
        if isinstance(spec.initial, _m.ExplicitIC):
            s0 = np.zeros((n_y, n_p))
            if spec.dae_class is DaeClass.INDEX1_MEMORY:
                # memory sensitivities coincide with the state sensitivities
                # at t0; zero initial data keeps every column zero
                w0 = np.zeros((n_z, n_p))
                pt = Point(st.ydot, st.y, st.z, memory[0], memory[1], p,
                           spec.t0)
                dyn = spec.modes[0].dynamics
                sdot0 = sdot_from_residual(dyn, pt, s0, w0, s_star=s0,
                                           w_star=w0)
                return cls(s0, w0, sdot0, s0.copy(), w0.copy(), n_p)
            mode0 = spec.initial_mode if isinstance(spec.initial_mode, int) \
                else 0
            dyn = spec.modes[mode0].dynamics
            pt = Point(st.ydot, st.y, st.z, st.y, st.z, p, spec.t0)
            a = (st.ydot, st.y, st.z, st.y, st.z, p, spec.t0)
            fyd, fy, fz = _m.eval_state_partials(dyn, *a)
            fp, _, _ = _m.eval_forcing_partials(dyn, *a)
            m = np.hstack([fyd, fz])
            sol = np.linalg.solve(m, -(fy @ s0 + fp))
            return cls(s0, sol[n_y:], sol[:n_y], None, None, n_p)
        # implicit initial conditions: differentiate {T0, F}
        mode0 = spec.initial_mode if isinstance(spec.initial_mode, int) else 0
        dyn = spec.modes[mode0].dynamics
        ic = spec.initial
        t0yd, t0y = _int._ic_partials(ic, st.ydot, st.y, p, spec.t0)
        t0p = _t0_p(ic, st.ydot, st.y, p, spec.t0)
        a = (st.ydot, st.y, st.z, st.y, st.z, p, spec.t0)
        fyd, fy, fz = _m.eval_state_partials(dyn, *a)
        fp, _, _ = _m.eval_forcing_partials(dyn, *a)
        m = np.block([[t0yd, t0y, np.zeros((ic.dim, n_z))],
                      [fyd, fy, fz]])
        sol = np.linalg.solve(m, -np.vstack([t0p, fp]))
        return cls(sol[n_y:2 * n_y], sol[2 * n_y:], sol[:n_y], None, None,
                   n_p)

    def make_system(self, spec, mode, memory, p, quad):
        m = spec.modes[mode]
        return FsaSystem(m.dynamics, p, memory[0], memory[1], self.s_star,
                         self.w_star, spec.n_y, spec.n_z, quad,
                         spec.dae_class is DaeClass.INDEX1_MEMORY)

    def apply_transition(self, spec, rec, st_minus, after, memory, p, tol,
                         g_minus, g_plus):
        guard = spec.modes[rec.mode_before].guard
        ys, zs = memory
        pt_m = Point(rec.ydot_minus, rec.y_minus, rec.z_minus, ys, zs, p,
                     rec.t)
        dyn_m = spec.modes[rec.mode_before].dynamics
        yddot_m, zdot_m = _m.compute_hidden_derivatives(dyn_m, pt_m,
                                                        spec.dae_class)
        tau = transition_time_sensitivity(guard, pt_m, self.S, self.W,
                                          yddot_m, zdot_m, sdot=self.Sdot,
                                          drift=rec.guard_drift)
        s_plus, w_plus, sdot_plus = fsa_jump(
            spec, rec, self.S, self.W, tau, p, sdot_minus=self.Sdot,
            memory=memory, memory_sens=(self.s_star, self.w_star))
        self.grad_leibniz += (g_minus - g_plus) * tau
        self.taus.append(tau)
        self.jumps.append({
            "t": rec.t, "tau": tau,
            "s_minus": self.S.copy(), "w_minus": self.W.copy(),
            "s_plus": s_plus.copy(), "w_plus": w_plus.copy(),
        })
        self.S, self.W, self.Sdot = s_plus, w_plus, sdot_plus
        if spec.dae_class is DaeClass.INDEX1_MEMORY:
            yddot_p, zdot_p = _plus_hidden(spec, rec, p)
            self.s_star = s_plus + np.outer(rec.ydot_plus, tau)
            self.w_star = w_plus + np.outer(zdot_p, tau)


def _t0_p(ic, yd, yy, p, t0):
    if ic.T0_p is not None:
        return np.asarray(ic.T0_p(yd, yy, p, t0), dtype=float).reshape(
            ic.dim, p.size)
    out = np.empty((ic.dim, p.size))
    steps = np.sqrt(np.finfo(float).eps) * np.maximum(1.0, np.abs(p))
    for j in range(p.size):
        pp = p.copy()
        pm = p.copy()
        pp[j] += steps[j]
        pm[j] -= steps[j]
        rp = np.asarray(ic.T0(yd, yy, pp, t0), dtype=float)
        rm = np.asarray(ic.T0(yd, yy, pm, t0), dtype=float)
        out[:, j] = (rp - rm) / (2 * steps[j])
    return out


def run_fsa(spec: HybridSystemSpec, tol: Optional[Tolerances] = None,
            p=None) -> FsaResult:
    """Integrate states and sensitivities together and return the functional
    G with its forward gradient dG/dp."""
    tol = tol or Tolerances()
    forward, sens, q = _int._drive_forward(spec, tol, p, with_sens=True)
    dgdp = q[1:] + sens.grad_leibniz
    bundle = SensitivityBundle(s=sens.S, w=sens.W, sdot=sens.Sdot,
                               taus=sens.taus, s_star=sens.s_star,
                               w_star=sens.w_star, grad_quad=dgdp.copy())
    return FsaResult(forward=forward, bundle=bundle, taus=sens.taus,
                     jumps=sens.jumps, G=forward.G, dGdp=dgdp)
