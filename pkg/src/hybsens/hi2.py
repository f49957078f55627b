"""Hessenberg index-2 specializations: consistent initialization against the
hidden constraint, staged state transitions, sensitivity reinitialization,
and the adjoint terminal/jump constructions that keep the algebraic adjoint
row satisfied.

The dynamics of this class read ``ydot = f(y, z, p, t)``, ``0 = k(y, p, t)``
with ``C B`` nonsingular, where ``A = f_y``, ``B = f_z``, ``C = k_y``.  The
residual row convention is ``[ydot - f; k]``.  Solutions additionally satisfy
the hidden constraint ``C f + k_t = 0``, which determines the algebraic
states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import model as _m
from .errors import NewtonDivergence, SingularMatrix, SingularTransition
from .model import DaeClass, HybridSystemSpec, ModeDynamics, Point

__all__ = [
    "Hi2Workspace",
    "build_workspace",
    "hidden_residual",
    "hi2_initialize",
    "hi2_transition",
    "hi2_fsa_initial_sensitivities",
    "hi2_fsa_jump",
    "hi2_adjoint_final",
    "hi2_adjoint_jump_terms",
    "hi2_mu_consistent",
]

_SQRT_EPS = math.sqrt(np.finfo(float).eps)


@dataclass
class Hi2Workspace:
    """First-order data of one mode at one point, with CB factorized."""

    A: np.ndarray        # f_y   (n_y, n_y)
    B: np.ndarray        # f_z   (n_y, n_z)
    C: np.ndarray        # k_y   (n_z, n_y)
    CB: np.ndarray       # (n_z, n_z)
    f_p: np.ndarray      # (n_y, n_p)
    k_p: np.ndarray      # (n_z, n_p)
    f_t: np.ndarray      # (n_y,)
    k_t: np.ndarray      # (n_z,)

    def solve_cb(self, rhs):
        try:
            return np.linalg.solve(self.CB, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularMatrix("C B is numerically singular") from exc

    def rowsolve_cb(self, row):
        """x with x (CB) = row, i.e. x = row (CB)^{-1}."""
        try:
            return np.linalg.solve(self.CB.T, np.asarray(row, dtype=float).T).T
        except np.linalg.LinAlgError as exc:
            raise SingularMatrix("C B is numerically singular") from exc


def build_workspace(dyn: ModeDynamics, point: Point) -> Hi2Workspace:
    n_y = point.y.size
    jac = _m.eval_jacobians(dyn, point)
    a = -jac.F_y[:n_y, :]
    b = -jac.F_z[:n_y, :]
    c = jac.F_y[n_y:, :]
    return Hi2Workspace(A=a, B=b, C=c, CB=c @ b,
                        f_p=-jac.F_p[:n_y, :], k_p=jac.F_p[n_y:, :],
                        f_t=-jac.F_t[:n_y], k_t=jac.F_t[n_y:])


def _f_of(dyn, y, z, p, t):
    n_y = y.size
    r = np.asarray(dyn.residual(np.zeros(n_y), y, z, y, z, p, t), dtype=float)
    return -r[:n_y]


def _k_of(dyn, y, z, p, t):
    n_y = y.size
    r = np.asarray(dyn.residual(np.zeros(n_y), y, z, y, z, p, t), dtype=float)
    return r[n_y:]


def _hidden(dyn, y, z, p, t):
    """C f + k_t at the point."""
    n_y = y.size
    pt = Point(np.zeros(n_y), y, z, y, z, p, t)
    jac = _m.eval_jacobians(dyn, pt)
    c = jac.F_y[n_y:, :]
    k_t = jac.F_t[n_y:]
    return c @ _f_of(dyn, y, z, p, t) + k_t


def hidden_residual(spec: HybridSystemSpec, mode: int, state, t, p=None):
    """Max-norm of the hidden constraint C ydot + k_t at a trajectory point."""
    p = np.asarray(p if p is not None else spec.p_nominal, dtype=float)
    dyn = spec.modes[mode].dynamics
    n_y = spec.n_y
    pt = Point(state.ydot, state.y, state.z, state.y, state.z, p, t)
    jac = _m.eval_jacobians(dyn, pt)
    c = jac.F_y[n_y:, :]
    k_t = jac.F_t[n_y:]
    r = c @ state.ydot + k_t
    return float(np.max(np.abs(r))) if r.size else 0.0


def _newton(fun, jacfun, x0, tol_abs, maxit=30):
    x = np.asarray(x0, dtype=float).copy()
    for _ in range(maxit):
        r = np.asarray(fun(x), dtype=float)
        j = np.atleast_2d(np.asarray(jacfun(x), dtype=float))
        try:
            d = np.linalg.solve(j, -r)
        except np.linalg.LinAlgError as exc:
            raise SingularMatrix("singular matrix in index-2 solve") from exc
        x = x + d
        if np.max(np.abs(d)) <= tol_abs * (1.0 + np.max(np.abs(x))):
            return x
    raise NewtonDivergence("index-2 nonlinear solve did not converge")


def hi2_initialize(spec: HybridSystemSpec, t0: float, tol=None, p=None):
    """Consistent initial state: y0 from {T0, k}, z0 from the hidden
    constraint, ydot0 = f.  Raises :class:`SingularMatrix` when CB (or the
    [T0_y; C] stack) is singular."""
    from .integrate import State, Tolerances
    tol = tol or Tolerances()
    p = np.asarray(p if p is not None else spec.p_nominal, dtype=float)
    n_y, n_z = spec.n_y, spec.n_z
    mode0 = spec.initial_mode if isinstance(spec.initial_mode, int) else 0
    dyn = spec.modes[mode0].dynamics
    ic = spec.initial
    ntol = 1e-3 * max(tol.atol, tol.rtol)

    if isinstance(ic, _m.ExplicitIC):
        y0 = np.asarray(ic.y0, dtype=float).copy()
        kres = _k_of(dyn, y0, np.zeros(n_z), p, t0)
        if np.max(np.abs(kres)) > tol.consistency_tol(
                1.0 + float(np.linalg.norm(y0))):
            raise SingularTransition(
                "explicit y0 does not satisfy the algebraic equations")
    else:
        def fun(yy):
            rt = np.asarray(ic.T0(np.zeros(n_y), yy, p, t0), dtype=float)
            return np.concatenate([rt, _k_of(dyn, yy, np.zeros(n_z), p, t0)])

        def jac(yy):
            pt = Point(np.zeros(n_y), yy, np.zeros(n_z), yy, np.zeros(n_z),
                       p, t0)
            jj = _m.eval_jacobians(dyn, pt)
            c = jj.F_y[n_y:, :]
            t0_y = _t0_y_partial(ic, yy, p, t0)
            return np.vstack([t0_y, c])

        y0 = _newton(fun, jac, np.zeros(n_y), ntol)

    # algebraic states from the hidden constraint; CB must be regular
    pt = Point(np.zeros(n_y), y0, np.zeros(n_z), y0, np.zeros(n_z), p, t0)
    ws = build_workspace(dyn, pt)
    sv = np.linalg.svd(ws.CB, compute_uv=False)
    if sv.size and sv[-1] <= 1e-12 * max(1.0, sv[0]):
        raise SingularMatrix("C B is singular: algebraic states are not "
                             "determined by the hidden constraint")

    def hfun(zz):
        return _hidden(dyn, y0, zz, p, t0)

    def hjac(zz):
        ptz = Point(np.zeros(n_y), y0, zz, y0, zz, p, t0)
        w = build_workspace(dyn, ptz)
        return w.CB

    z0 = _newton(hfun, hjac, np.zeros(n_z), ntol)
    yd0 = _f_of(dyn, y0, z0, p, t0)
    return State(yd0, y0, z0)


def _t0_y_partial(ic, yy, p, t0):
    if ic.T0_y is not None:
        return np.asarray(ic.T0_y(np.zeros(yy.size), yy, p, t0),
                          dtype=float).reshape(ic.dim, yy.size)
    cols = np.empty((ic.dim, yy.size))
    steps = _SQRT_EPS * np.maximum(1.0, np.abs(yy))
    for j in range(yy.size):
        yp = yy.copy()
        ym = yy.copy()
        yp[j] += steps[j]
        ym[j] -= steps[j]
        rp = np.asarray(ic.T0(np.zeros(yy.size), yp, p, t0), dtype=float)
        rm = np.asarray(ic.T0(np.zeros(yy.size), ym, p, t0), dtype=float)
        cols[:, j] = (rp - rm) / (2 * steps[j])
    return cols


def hi2_transition(spec: HybridSystemSpec, mode_from: int, before, t: float,
                   tol=None, p=None):
    """Staged transition solve: y+ from {T, k}, z+ from the hidden
    constraint, ydot+ = f."""
    from .integrate import State, Tolerances
    tol = tol or Tolerances()
    p = np.asarray(p if p is not None else spec.p_nominal, dtype=float)
    n_y, n_z = spec.n_y, spec.n_z
    tmap = spec.modes[mode_from].transition
    dyn_t = spec.modes[tmap.target].dynamics
    ntol = 1e-3 * max(tol.atol, tol.rtol)
    bargs = (before.ydot, before.y, before.z)

    def fun(yy):
        rt = np.asarray(tmap.T(before.ydot, yy, before.z, *bargs, p, t),
                        dtype=float)
        return np.concatenate([rt, _k_of(dyn_t, yy, before.z, p, t)])

    def jac(yy):
        tp = _m.map_partials(tmap, (before.ydot, yy, before.z), bargs, p, t)
        pt = Point(np.zeros(n_y), yy, before.z, yy, before.z, p, t)
        jj = _m.eval_jacobians(dyn_t, pt)
        c = jj.F_y[n_y:, :]
        m = np.vstack([tp["T_y_plus"], c])
        sv = np.linalg.svd(m, compute_uv=False)
        if sv[-1] <= 1e-12 * max(1.0, sv[0]):
            raise SingularTransition("[T_y+; C] is numerically singular")
        return m

    y_p = _newton(fun, jac, before.y.copy(), ntol)

    def hfun(zz):
        return _hidden(dyn_t, y_p, zz, p, t)

    def hjac(zz):
        ptz = Point(np.zeros(n_y), y_p, zz, y_p, zz, p, t)
        return build_workspace(dyn_t, ptz).CB

    z_p = _newton(hfun, hjac, before.z.copy(), ntol)
    yd_p = _f_of(dyn_t, y_p, z_p, p, t)
    return State(yd_p, y_p, z_p)


# ---------------------------------------------------------------------------
# Sensitivity pieces


def _hidden_dirderiv_y(dyn, y, z, p, t, direction):
    eps = _SQRT_EPS * max(1.0, float(np.linalg.norm(y)))
    hp = _hidden(dyn, y + eps * direction, z, p, t)
    hm = _hidden(dyn, y - eps * direction, z, p, t)
    return (hp - hm) / (2 * eps)


def _hidden_p_partial(dyn, y, z, p, t):
    n_z = z.size
    out = np.empty((n_z, p.size))
    steps = _SQRT_EPS * np.maximum(1.0, np.abs(p))
    for j in range(p.size):
        pp = p.copy()
        pm = p.copy()
        pp[j] += steps[j]
        pm[j] -= steps[j]
        out[:, j] = (_hidden(dyn, y, z, pp, t)
                     - _hidden(dyn, y, z, pm, t)) / (2 * steps[j])
    return out


def _w_from_hidden(dyn, y, z, p, t, s):
    """Algebraic sensitivities from the differentiated hidden constraint:
    H_y s + (CB) w + H_p = 0, column by column."""
    n_y = y.size
    pt = Point(np.zeros(n_y), y, z, y, z, p, t)
    ws = build_workspace(dyn, pt)
    hp = _hidden_p_partial(dyn, y, z, p, t)
    rhs = np.empty_like(hp)
    for j in range(p.size):
        rhs[:, j] = _hidden_dirderiv_y(dyn, y, z, p, t, s[:, j]) + hp[:, j]
    return -ws.solve_cb(rhs), ws


def hi2_fsa_initial_sensitivities(spec: HybridSystemSpec, state, t0, p):
    """(s0, w0, sdot0) at the initial time.

    s0 solves the differentiated {T0, k} system (zero for explicit y0); w0
    follows from the differentiated hidden constraint.
    """
    n_y, n_z, n_p = spec.n_y, spec.n_z, spec.p_nominal.size
    mode0 = spec.initial_mode if isinstance(spec.initial_mode, int) else 0
    dyn = spec.modes[mode0].dynamics
    ic = spec.initial
    if isinstance(ic, _m.ExplicitIC):
        s0 = np.zeros((n_y, n_p))
    else:
        t0_y = _t0_y_partial(ic, state.y, p, t0)
        t0_p = _t0_p_partial(ic, state.y, p, t0)
        pt = Point(state.ydot, state.y, state.z, state.y, state.z, p, t0)
        jac = _m.eval_jacobians(dyn, pt)
        c = jac.F_y[n_y:, :]
        k_p = jac.F_p[n_y:, :]
        m = np.vstack([t0_y, c])
        try:
            s0 = np.linalg.solve(m, -np.vstack([t0_p, k_p]))
        except np.linalg.LinAlgError as exc:
            raise SingularMatrix("[T0_y; C] singular") from exc
    w0, ws = _w_from_hidden(dyn, state.y, state.z, p, t0, s0)
    sdot0 = ws.A @ s0 + ws.B @ w0 + ws.f_p
    return s0, w0, sdot0


def _t0_p_partial(ic, yy, p, t0):
    if ic.T0_p is not None:
        return np.asarray(ic.T0_p(np.zeros(yy.size), yy, p, t0),
                          dtype=float).reshape(ic.dim, p.size)
    cols = np.empty((ic.dim, p.size))
    steps = _SQRT_EPS * np.maximum(1.0, np.abs(p))
    for j in range(p.size):
        pp = p.copy()
        pm = p.copy()
        pp[j] += steps[j]
        pm[j] -= steps[j]
        rp = np.asarray(ic.T0(np.zeros(yy.size), yy, pp, t0), dtype=float)
        rm = np.asarray(ic.T0(np.zeros(yy.size), yy, pm, t0), dtype=float)
        cols[:, j] = (rp - rm) / (2 * steps[j])
    return cols


def hi2_fsa_jump(spec: HybridSystemSpec, rec, s_minus, w_minus, tau, p):
    """Sensitivities entering the next mode after a located transition."""
    n_y = spec.n_y
    tmap = spec.modes[rec.mode_before].transition
    dyn_t = spec.modes[rec.mode_after].dynamics
    bargs = (rec.ydot_minus, rec.y_minus, rec.z_minus)
    pargs = (rec.ydot_plus, rec.y_plus, rec.z_plus)
    tp = _m.map_partials(tmap, pargs, bargs, p, rec.t)
    pt_plus = Point(rec.ydot_plus, rec.y_plus, rec.z_plus, rec.y_plus,
                    rec.z_plus, p, rec.t)
    jac_t = _m.eval_jacobians(dyn_t, pt_plus)
    c = jac_t.F_y[n_y:, :]
    k_p = jac_t.F_p[n_y:, :]
    k_t = jac_t.F_t[n_y:]
    m = np.vstack([tp["T_y_plus"], c])
    sv = np.linalg.svd(m, compute_uv=False)
    if sv[-1] <= 1e-12 * max(1.0, sv[0]):
        raise SingularTransition("[T_y+; C] is numerically singular")
    top = (tp["T_y_plus"] @ np.outer(rec.ydot_plus, tau)
           + tp["T_y_minus"] @ (s_minus + np.outer(rec.ydot_minus, tau))
           + np.outer(tp["T_t"], tau) + tp["T_p"])
    bot = c @ np.outer(rec.ydot_plus, tau) + np.outer(k_t, tau) + k_p
    s_plus = np.linalg.solve(m, -np.vstack([top, bot]))
    w_plus, ws = _w_from_hidden(dyn_t, rec.y_plus, rec.z_plus, p, rec.t,
                                s_plus)
    sdot_plus = ws.A @ s_plus + ws.B @ w_plus + ws.f_p
    return s_plus, w_plus, sdot_plus


# ---------------------------------------------------------------------------
# Adjoint pieces


def _bdot_gzdot(spec, mode, trace, t, p, gspec):
    """Time derivatives of B = f_z and g_z by central differences along the
    stored trajectory, step 1e-6 (1 + |t|)."""
    dyn = spec.modes[mode].dynamics
    n_y = spec.n_y
    dt = 1e-6 * (1.0 + abs(t))

    def at(tt):
        y = trace.eval_y(tt)
        z = trace.eval_z(tt)
        yd = trace.eval_ydot(tt)
        pt = Point(yd, y, z, trace.ystar, trace.zstar, p, tt)
        _, _, fz = _m.eval_state_partials(dyn, yd, y, z, trace.ystar,
                                          trace.zstar, p, tt)
        b = -fz[:n_y, :]
        _, g_z, _ = _m.quad_partials(gspec, y, z, p, tt)
        return b, g_z

    bp, gzp = at(t + dt)
    bm, gzm = at(t - dt)
    return (bp - bm) / (2 * dt), (gzp - gzm) / (2 * dt)


def hi2_mu_consistent(spec, mode, trace, t, lam, p, gspec):
    """Algebraic adjoint variables from the differentiated adjoint
    constraint: mu^T = (lam^T (Bdot - A B) + (gzdot - g_y B)) (CB)^{-1}."""
    dyn = spec.modes[mode].dynamics
    y = trace.eval_y(t)
    z = trace.eval_z(t)
    yd = trace.eval_ydot(t)
    pt = Point(yd, y, z, trace.ystar, trace.zstar, p, t)
    ws = build_workspace(dyn, pt)
    bdot, gzdot = _bdot_gzdot(spec, mode, trace, t, p, gspec)
    g_y, g_z, _ = _m.quad_partials(gspec, y, z, p, t)
    rhs = lam @ (bdot - ws.A @ ws.B) + (gzdot - g_y @ ws.B)
    return ws.rowsolve_cb(rhs)


def hi2_adjoint_final(spec, mode, trace, t_f, p, gspec):
    """Terminal adjoint values (lam_f, mu_f) satisfying lam^T B + g_z = 0."""
    dyn = spec.modes[mode].dynamics
    y = trace.eval_y(t_f)
    z = trace.eval_z(t_f)
    yd = trace.eval_ydot(t_f)
    pt = Point(yd, y, z, trace.ystar, trace.zstar, p, t_f)
    ws = build_workspace(dyn, pt)
    _, g_z, _ = _m.quad_partials(gspec, y, z, p, t_f)
    xi = -ws.rowsolve_cb(g_z)
    lam = (xi @ ws.C).reshape(spec.n_y)
    mu = hi2_mu_consistent(spec, mode, trace, t_f, lam, p, gspec)
    return lam, mu.reshape(spec.n_z)


def hi2_terminal_gradient_term(spec, mode, trace, t_f, p, gspec):
    """Gradient contribution -g_z (CB)^{-1} k_p at the final time."""
    dyn = spec.modes[mode].dynamics
    y = trace.eval_y(t_f)
    z = trace.eval_z(t_f)
    yd = trace.eval_ydot(t_f)
    pt = Point(yd, y, z, trace.ystar, trace.zstar, p, t_f)
    ws = build_workspace(dyn, pt)
    _, g_z, _ = _m.quad_partials(gspec, y, z, p, t_f)
    return -(ws.rowsolve_cb(g_z) @ ws.k_p).reshape(spec.n_p)


def hi2_adjoint_jump_terms(spec, rec, trace_before, lam_plus, jl, g_minus,
                           g_plus, p, gspec_before):
    """Adjoint jump at one transition.

    Returns (lam_minus, mu_minus, gradient_increment) built from the jump
    linearization ``tau = alpha + beta s-``, ``s+ = Gamma + Delta s-`` via
    the auxiliary vector X and the zeta correction keeping the algebraic
    adjoint row satisfied at t-.
    """
    dyn = spec.modes[rec.mode_before].dynamics
    pt = Point(rec.ydot_minus, rec.y_minus, rec.z_minus, trace_before.ystar,
               trace_before.zstar, p, rec.t)
    ws = build_workspace(dyn, pt)
    _, g_z, _ = _m.quad_partials(gspec_before, rec.y_minus, rec.z_minus, p,
                                 rec.t)
    dg = g_minus - g_plus
    x = dg * jl.beta + lam_plus @ jl.Delta                 # (n_y,)
    zeta = -ws.rowsolve_cb(g_z + x @ ws.B)                 # (n_z,)
    lam_minus = x + zeta @ ws.C
    grad_inc = dg * jl.alpha + lam_plus @ jl.Gamma \
        + (zeta @ ws.k_p).reshape(spec.n_p)
    mu_minus = hi2_mu_consistent(spec, rec.mode_before, trace_before, rec.t,
                                 lam_minus, p, gspec_before)
    return lam_minus, mu_minus.reshape(spec.n_z), grad_inc
