"""Backward-in-time adjoint propagation: final-condition construction,
per-mode backward integration against stored dense output, adjoint jumps at
transitions, the accumulator transfer scheme for systems with memory, and
gradient assembly.

The fully implicit class is integrated in the conjugate variable
``nu = F_ydot^T lam`` (differential) with ``lam`` recovered algebraically
from ``[F_ydot | F_z]^T lam = [nu; -g_z^T]`` at every stage; this removes
any need to differentiate F_ydot in time.  The split classes integrate
``lam`` directly with ``mu`` algebraic.  A backward run consumes only the
state traces of a forward run, never forward sensitivities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import fsa as _fsa
from . import hi2 as _hi2
from . import integrate as _int
from . import model as _m
from .errors import SingularMatrix, SingularTransition
from .integrate import DaeSystem, ForwardResult, State, Tolerances
from .model import DaeClass, HybridSystemSpec, Point

__all__ = [
    "AdjointBundle",
    "JumpLinearization",
    "AsaResult",
    "adjoint_rhs",
    "adjoint_final_conditions",
    "build_jump_linearization",
    "adjoint_jump",
    "run_asa",
]


@dataclass
class AdjointBundle:
    """Adjoint state of a backward run at one instant.

    ``lam`` is the full adjoint vector (n_y + n_z for the fully implicit
    class, else n_y with ``mu`` of size n_z).  ``I``, ``J``, ``K`` are the
    per-mode quadratures of the memory formulation and ``A``/``B`` the
    accumulators carrying memory coupling backward through transitions.
    """

    lam: np.ndarray
    mu: Optional[np.ndarray]
    I: Optional[np.ndarray]
    J: Optional[np.ndarray]
    K: np.ndarray
    A: Optional[np.ndarray]
    B: Optional[np.ndarray]
    dGdp: np.ndarray


@dataclass
class JumpLinearization:
    """Affine maps tau = alpha + beta s-, s+ = Gamma + Delta s- of one
    transition, consistent with the forward sensitivity jump solve."""

    alpha: np.ndarray           # (n_p,)
    beta: np.ndarray            # (n_y,)
    Gamma: np.ndarray           # (n_y, n_p)
    Delta: np.ndarray           # (n_y, n_y)
    X: Optional[np.ndarray] = None   # (n_y,), Hessenberg-2 only


@dataclass
class AdjointJumpResult:
    lam_minus: np.ndarray
    mu_minus: Optional[np.ndarray]
    grad_increment: np.ndarray
    A: Optional[np.ndarray] = None
    B: Optional[np.ndarray] = None


@dataclass
class AsaResult:
    """Backward run output: adjoint trajectory segments (ascending t within
    each mode), per-transition adjoint jumps, and the gradient."""

    spec: HybridSystemSpec
    p: np.ndarray
    segments: list
    jumps: list
    G: float
    dGdp: np.ndarray
    lam0: np.ndarray
    mu0: Optional[np.ndarray]


def _split_blocks(dyn, ydot, y, z, ystar, zstar, p, t, n_y):
    fyd, fy, fz = _m.eval_state_partials(dyn, ydot, y, z, ystar, zstar, p, t)
    return fyd, fy, fz


def adjoint_rhs(dyn, point: Point, lam, mu, g_y, g_z,
                dae_class: DaeClass, lam_dot=None, nu_dot=None):
    """Residual rows of the adjoint system in forward-time form.

    For the fully implicit class ``nu_dot`` must carry d(F_ydot^T lam)/dt;
    for the split classes ``lam_dot`` carries dlam/dt.  A zero residual
    certifies that the supplied derivatives satisfy the adjoint equations.
    """
    n_y = point.y.size
    a = (point.ydot, point.y, point.z, point.ystar, point.zstar, point.p,
         point.t)
    fyd, fy, fz = _m.eval_state_partials(dyn, *a)
    if dae_class is DaeClass.FULLY_IMPLICIT_01:
        if nu_dot is None:
            raise ValueError("nu_dot required for the fully implicit class")
        r1 = -nu_dot + fy.T @ lam + g_y
        r2 = fz.T @ lam + g_z
        return np.concatenate([r1, r2])
    if lam_dot is None:
        raise ValueError("lam_dot required for the split classes")
    f_y = -fy[:n_y, :]
    k_y = fy[n_y:, :]
    f_z = -fz[:n_y, :]
    k_z = fz[n_y:, :]
    r1 = lam_dot + f_y.T @ lam + k_y.T @ mu + g_y
    if dae_class is DaeClass.HESSENBERG2:
        r2 = f_z.T @ lam + g_z
    else:
        r2 = f_z.T @ lam + k_z.T @ mu + g_z
    return np.concatenate([r1, r2])


# ---------------------------------------------------------------------------
# Final conditions


def adjoint_final_conditions(spec: HybridSystemSpec, forward: ForwardResult,
                             p=None):
    """Consistent terminal adjoint values (lam_f, mu_f) at t_f."""
    p = np.asarray(p if p is not None else forward.p, dtype=float)
    trace = forward.traces[-1]
    t_f = trace.t_end
    mode = trace.mode
    dyn = spec.modes[mode].dynamics
    quad = spec.mode_quadrature(mode)
    y = trace.eval_y(t_f)
    z = trace.eval_z(t_f)
    yd = trace.eval_ydot(t_f)
    if spec.dae_class is DaeClass.HESSENBERG2:
        return _hi2.hi2_adjoint_final(spec, mode, trace, t_f, p, quad)
    _, g_z, _ = _m.quad_partials(quad, y, z, p, t_f)
    a = (yd, y, z, trace.ystar, trace.zstar, p, t_f)
    fyd, fy, fz = _m.eval_state_partials(dyn, *a)
    if spec.dae_class is DaeClass.FULLY_IMPLICIT_01:
        m = np.hstack([fyd, fz]).T
        rhs = np.concatenate([np.zeros(spec.n_y), -g_z])
        try:
            lam = np.linalg.solve(m, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularMatrix("[F_ydot | F_z] singular at t_f") from exc
        return lam, None
    # memory class: lam(t_f) = 0, mu from the algebraic adjoint row
    lam = np.zeros(spec.n_y)
    k_z = fz[spec.n_y:, :]
    try:
        mu = np.linalg.solve(k_z.T, -g_z)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix("k_z singular at t_f") from exc
    return lam, mu


# ---------------------------------------------------------------------------
# Jump linearization


def build_jump_linearization(spec: HybridSystemSpec, rec, p=None,
                             trace_before=None, memory_sens=None,
                             lam_plus=None, g_minus=None,
                             g_plus=None) -> JumpLinearization:
    """Affine transition maps (alpha, beta, Gamma, Delta) built from the
    same linear solves as the forward sensitivity jump.

    For the fully implicit class the minus-side relations
    ``[F_ydot | F_z] [sdot-; w-] = -(F_y s- + F_p)`` are composed into the
    guard row, so guards may depend on ydot and z.  ``memory_sens`` supplies
    the frozen memory sensitivities of the exited mode for the memory class
    (zero by default).  When ``lam_plus`` and the boundary integrand values
    are given, the Hessenberg-2 auxiliary vector X is attached.
    """
    p = np.asarray(p if p is not None else spec.p_nominal, dtype=float)
    n_y, n_z, n_p = spec.n_y, spec.n_z, p.size
    guard = spec.modes[rec.mode_before].guard
    dyn_m = spec.modes[rec.mode_before].dynamics
    mem = (trace_before.ystar, trace_before.zstar) if trace_before is not None \
        else (rec.y_minus, rec.z_minus)
    pt_m = Point(rec.ydot_minus, rec.y_minus, rec.z_minus, mem[0], mem[1],
                 p, rec.t)
    h_ydot, h_y, h_z, h_p, h_t = _m.guard_partials(guard, pt_m)
    drift = rec.guard_drift
    a_m = (rec.ydot_minus, rec.y_minus, rec.z_minus, mem[0], mem[1], p, rec.t)

    if spec.dae_class is DaeClass.FULLY_IMPLICIT_01:
        fyd, fy, fz = _m.eval_state_partials(dyn_m, *a_m)
        fp, _, _ = _m.eval_forcing_partials(dyn_m, *a_m)
        msub = np.hstack([fyd, fz])
        pq = np.linalg.solve(msub, -np.hstack([fp, fy]))
        p1, q1 = pq[:n_y, :n_p], pq[:n_y, n_p:]
        p2, q2 = pq[n_y:, :n_p], pq[n_y:, n_p:]
        alpha = -(h_p + h_ydot @ p1 + h_z @ p2) / drift
        beta = -(h_y + h_ydot @ q1 + h_z @ q2) / drift
        gamma, _, _ = _fsa._jump_fully_implicit(
            spec, rec, np.zeros((n_y, n_p)), p2, alpha, p, sdot_minus=p1,
            include_p=True, memory=mem)
        delta, _, _ = _fsa._jump_fully_implicit(
            spec, rec, np.eye(n_y), q2, beta, p, sdot_minus=q1,
            include_p=False, memory=mem)
    elif spec.dae_class is DaeClass.HESSENBERG2:
        hy = _hi2_hidden_y(dyn_m, rec, p, n_y, n_z)
        hp = _hi2._hidden_p_partial(dyn_m, rec.y_minus, rec.z_minus, p, rec.t)
        pt_ws = _hi2.build_workspace(dyn_m, pt_m)
        p2 = -pt_ws.solve_cb(hp)
        q2 = -pt_ws.solve_cb(hy)
        alpha = -(h_p + h_z @ p2) / drift
        beta = -(h_y + h_z @ q2) / drift
        gamma = _hi2_gamma_delta(spec, rec, alpha, np.zeros((n_y, n_p)), p,
                                 include_p=True)
        delta = _hi2_gamma_delta(spec, rec, beta, np.eye(n_y), p,
                                 include_p=False)
    else:
        fyd, fy, fz = _m.eval_state_partials(dyn_m, *a_m)
        fp, fys, fzs = _m.eval_forcing_partials(dyn_m, *a_m)
        k_y = fy[n_y:, :]
        k_z = fz[n_y:, :]
        k_p = fp[n_y:, :]
        if memory_sens is not None and memory_sens[0] is not None:
            k_p = k_p + fys[n_y:, :] @ memory_sens[0] \
                + fzs[n_y:, :] @ memory_sens[1]
        p2 = np.linalg.solve(k_z, -k_p)
        q2 = np.linalg.solve(k_z, -k_y)
        alpha = -(h_p + h_z @ p2) / drift
        beta = -(h_y + h_z @ q2) / drift
        gamma, _, _ = _fsa._jump_memory(
            spec, rec, np.zeros((n_y, n_p)), p2, alpha, p, None, mem,
            memory_sens, include_p=True)
        delta, _, _ = _fsa._jump_memory(
            spec, rec, np.eye(n_y), q2, beta, p, None, mem, memory_sens,
            include_p=False)

    jl = JumpLinearization(alpha=np.asarray(alpha, dtype=float).reshape(n_p),
                           beta=np.asarray(beta, dtype=float).reshape(n_y),
                           Gamma=gamma, Delta=delta)
    if spec.dae_class is DaeClass.HESSENBERG2 and lam_plus is not None:
        jl.X = (g_minus - g_plus) * jl.beta + lam_plus @ jl.Delta
    return jl


def _hi2_hidden_y(dyn_m, rec, p, n_y, n_z):
    out = np.empty((n_z, n_y))
    for j in range(n_y):
        e = np.zeros(n_y)
        e[j] = 1.0
        out[:, j] = _hi2._hidden_dirderiv_y(dyn_m, rec.y_minus, rec.z_minus,
                                            p, rec.t, e)
    return out


def _hi2_gamma_delta(spec, rec, tau, s_minus, p, include_p):
    n_y = spec.n_y
    tmap = spec.modes[rec.mode_before].transition
    dyn_t = spec.modes[rec.mode_after].dynamics
    margs = (rec.ydot_minus, rec.y_minus, rec.z_minus)
    pargs = (rec.ydot_plus, rec.y_plus, rec.z_plus)
    tp = _m.map_partials(tmap, pargs, margs, p, rec.t)
    pt_plus = Point(rec.ydot_plus, rec.y_plus, rec.z_plus, rec.y_plus,
                    rec.z_plus, p, rec.t)
    jac_t = _m.eval_jacobians(dyn_t, pt_plus)
    c = jac_t.F_y[n_y:, :]
    k_p = jac_t.F_p[n_y:, :]
    k_t = jac_t.F_t[n_y:]
    m = np.vstack([tp["T_y_plus"], c])
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    top = (tp["T_y_plus"] @ np.outer(rec.ydot_plus, tau)
           + tp["T_y_minus"] @ (s_minus + np.outer(rec.ydot_minus, tau))
           + np.outer(tp["T_t"], tau))
    bot = c @ np.outer(rec.ydot_plus, tau) + np.outer(k_t, tau)
    if include_p:
        top = top + tp["T_p"]
        bot = bot + k_p
    try:
        return np.linalg.solve(m, -np.vstack([top, bot]))
    except np.linalg.LinAlgError as exc:
        raise SingularTransition("[T_y+; C] singular") from exc


# ---------------------------------------------------------------------------
# Adjoint jumps


def adjoint_jump(spec: HybridSystemSpec, rec, lam_plus, mu_plus,
                 jl: Optional[JumpLinearization], g_minus, g_plus, p=None,
                 trace_before=None, quads=None,
                 accums=None) -> AdjointJumpResult:
    """Transfer the adjoint variables across one transition (backward in
    time) and return the gradient increment it contributes.

    For the memory class ``quads=(I, J)`` and ``accums=(A, B)`` drive the
    accumulator transfer scheme; the other classes use the jump
    linearization so that every s- coefficient in the gradient cancels.
    """
    p = np.asarray(p if p is not None else spec.p_nominal, dtype=float)
    n_y, n_z = spec.n_y, spec.n_z
    dg = g_minus - g_plus
    dyn_m = spec.modes[rec.mode_before].dynamics
    mem = (trace_before.ystar, trace_before.zstar) if trace_before is not None \
        else (rec.y_minus, rec.z_minus)
    a_m = (rec.ydot_minus, rec.y_minus, rec.z_minus, mem[0], mem[1], p, rec.t)
    quad_m = spec.mode_quadrature(rec.mode_before)
    _, g_z_m, _ = _m.quad_partials(quad_m, rec.y_minus, rec.z_minus, p, rec.t)

    if spec.dae_class is DaeClass.FULLY_IMPLICIT_01:
        dyn_p = spec.modes[rec.mode_after].dynamics
        a_p = (rec.ydot_plus, rec.y_plus, rec.z_plus, rec.y_plus, rec.z_plus,
               p, rec.t)
        fyd_p, _, _ = _m.eval_state_partials(dyn_p, *a_p)
        nu_plus = fyd_p.T @ lam_plus
        nu_minus = jl.Delta.T @ nu_plus - dg * jl.beta
        inc = dg * jl.alpha - nu_plus @ jl.Gamma
        fyd_m, _, fz_m = _m.eval_state_partials(dyn_m, *a_m)
        m = np.hstack([fyd_m, fz_m]).T
        rhs = np.concatenate([nu_minus, -g_z_m])
        try:
            lam_minus = np.linalg.solve(m, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularTransition("[F_ydot | F_z] singular at t-") from exc
        return AdjointJumpResult(lam_minus, None, inc)

    if spec.dae_class is DaeClass.HESSENBERG2:
        lam_minus, mu_minus, inc = _hi2.hi2_adjoint_jump_terms(
            spec, rec, trace_before, lam_plus, jl, g_minus, g_plus, p, quad_m)
        return AdjointJumpResult(lam_minus, mu_minus, inc)

    # memory class: accumulator transfer with k_z-eliminated partials
    iq, jq = quads
    acc_a, acc_b = accums
    fyd, fy, fz = _m.eval_state_partials(dyn_m, *a_m)
    fp, fys, fzs = _m.eval_forcing_partials(dyn_m, *a_m)
    k_y = fy[n_y:, :]
    k_z = fz[n_y:, :]
    k_p = fp[n_y:, :]
    k_ys = fys[n_y:, :]
    k_zs = fzs[n_y:, :]
    kzinv = np.linalg.inv(k_z)
    ky_e = -kzinv @ k_y
    kp_e = -kzinv @ k_p
    kys_e = -kzinv @ k_ys
    kzs_e = -kzinv @ k_zs
    ja = jq + acc_a
    lam_minus = lam_plus + iq + ja @ ky_e + acc_b
    inc = ja @ kp_e
    new_b = ja @ kys_e
    new_a = ja @ kzs_e
    f_z = -fz[:n_y, :]
    try:
        mu_minus = np.linalg.solve(k_z.T, -(f_z.T @ lam_minus + g_z_m))
    except np.linalg.LinAlgError as exc:
        raise SingularTransition("k_z singular at t-") from exc
    return AdjointJumpResult(lam_minus, mu_minus, inc, A=new_a, B=new_b)


# ---------------------------------------------------------------------------
# Backward system adapters


class _AdjFullyImplicitSystem(DaeSystem):
    """nu differential, lam algebraic; sigma = t_hi - t."""

    def __init__(self, spec, trace, p, quad, t_hi):
        self.spec = spec
        self.dyn = spec.modes[trace.mode].dynamics
        self.trace = trace
        self.p = p
        self.quad = quad
        self.t_hi = t_hi
        self.ny = spec.n_y
        self.nz = spec.n_y + spec.n_z
        self.nlin = 0
        self.nq = p.size

    def _fwd(self, sigma):
        t = self.t_hi - sigma
        return (self.trace.eval_ydot(t), self.trace.eval_y(t),
                self.trace.eval_z(t), t)

    def residual(self, nudot, nu, lam, sigma):
        yd, y, z, t = self._fwd(sigma)
        a = (yd, y, z, self.trace.ystar, self.trace.zstar, self.p, t)
        fyd, fy, fz = _m.eval_state_partials(self.dyn, *a)
        g_y, g_z, _ = _m.quad_partials(self.quad, y, z, self.p, t)
        r1 = nudot + fy.T @ lam + g_y
        r2 = fyd.T @ lam - nu
        r3 = fz.T @ lam + g_z
        return np.concatenate([r1, r2, r3])

    def jac(self, nudot, nu, lam, sigma):
        yd, y, z, t = self._fwd(sigma)
        a = (yd, y, z, self.trace.ystar, self.trace.zstar, self.p, t)
        fyd, fy, fz = _m.eval_state_partials(self.dyn, *a)
        ny, nz = self.ny, self.spec.n_z
        f_nudot = np.vstack([np.eye(ny), np.zeros((ny + nz, ny))])
        f_nu = np.vstack([np.zeros((ny, ny)), -np.eye(ny),
                          np.zeros((nz, ny))])
        f_lam = np.vstack([fy.T, fyd.T, fz.T])
        return f_nudot, f_nu, f_lam

    def quad_rhs(self, nudot, nu, lam, sigma, S, W):
        yd, y, z, t = self._fwd(sigma)
        a = (yd, y, z, self.trace.ystar, self.trace.zstar, self.p, t)
        fp, _, _ = _m.eval_forcing_partials(self.dyn, *a)
        _, _, g_p = _m.quad_partials(self.quad, y, z, self.p, t)
        return g_p + lam @ fp


class _AdjSplitSystem(DaeSystem):
    """lam differential, mu algebraic, for the split classes."""

    def __init__(self, spec, trace, p, quad, t_hi):
        self.spec = spec
        self.dyn = spec.modes[trace.mode].dynamics
        self.trace = trace
        self.p = p
        self.quad = quad
        self.t_hi = t_hi
        self.ny = spec.n_y
        self.nz = spec.n_z
        self.nlin = 0
        self.memory = spec.dae_class is DaeClass.INDEX1_MEMORY
        self.nq = (spec.n_y + spec.n_z + p.size) if self.memory else p.size

    def _fwd(self, sigma):
        t = self.t_hi - sigma
        return (self.trace.eval_ydot(t), self.trace.eval_y(t),
                self.trace.eval_z(t), t)

    def residual(self, lamdot, lam, mu, sigma):
        yd, y, z, t = self._fwd(sigma)
        n_y = self.ny
        a = (yd, y, z, self.trace.ystar, self.trace.zstar, self.p, t)
        fyd, fy, fz = _m.eval_state_partials(self.dyn, *a)
        g_y, g_z, _ = _m.quad_partials(self.quad, y, z, self.p, t)
        f_y = -fy[:n_y, :]
        k_y = fy[n_y:, :]
        f_z = -fz[:n_y, :]
        k_z = fz[n_y:, :]
        r1 = lamdot - (f_y.T @ lam + k_y.T @ mu + g_y)
        if self.memory:
            r2 = f_z.T @ lam + k_z.T @ mu + g_z
        else:
            r2 = f_z.T @ lam + g_z
        return np.concatenate([r1, r2])

    def jac(self, lamdot, lam, mu, sigma):
        yd, y, z, t = self._fwd(sigma)
        n_y, n_z = self.ny, self.nz
        a = (yd, y, z, self.trace.ystar, self.trace.zstar, self.p, t)
        fyd, fy, fz = _m.eval_state_partials(self.dyn, *a)
        f_y = -fy[:n_y, :]
        k_y = fy[n_y:, :]
        f_z = -fz[:n_y, :]
        k_z = fz[n_y:, :]
        f_ld = np.vstack([np.eye(n_y), np.zeros((n_z, n_y))])
        f_l = np.vstack([-f_y.T, f_z.T])
        if self.memory:
            f_mu = np.vstack([-k_y.T, k_z.T])
        else:
            f_mu = np.vstack([-k_y.T, np.zeros((n_z, n_z))])
        return f_ld, f_l, f_mu

    def quad_rhs(self, lamdot, lam, mu, sigma, S, W):
        yd, y, z, t = self._fwd(sigma)
        n_y = self.ny
        a = (yd, y, z, self.trace.ystar, self.trace.zstar, self.p, t)
        fp, fys, fzs = _m.eval_forcing_partials(self.dyn, *a)
        _, _, g_p = _m.quad_partials(self.quad, y, z, self.p, t)
        f_p = -fp[:n_y, :]
        k_p = fp[n_y:, :]
        kq = g_p + lam @ f_p + mu @ k_p
        if not self.memory:
            return kq
        f_ys = -fys[:n_y, :]
        k_ys = fys[n_y:, :]
        f_zs = -fzs[:n_y, :]
        k_zs = fzs[n_y:, :]
        iq = lam @ f_ys + mu @ k_ys
        jq = lam @ f_zs + mu @ k_zs
        return np.concatenate([iq, jq, kq])


# ---------------------------------------------------------------------------
# Backward driver


def run_asa(spec: HybridSystemSpec, forward: ForwardResult,
            tol: Optional[Tolerances] = None, p=None) -> AsaResult:
    """Integrate the adjoint system backward over the stored forward traces
    and assemble dG/dp.  Only state traces are consumed."""
    tol = tol or forward.tol
    p = np.asarray(p if p is not None else forward.p, dtype=float)
    n_y, n_z, n_p = spec.n_y, spec.n_z, p.size
    cls = spec.dae_class
    full01 = cls is DaeClass.FULLY_IMPLICIT_01
    memory = cls is DaeClass.INDEX1_MEMORY

    lam_f, mu_f = adjoint_final_conditions(spec, forward, p)
    dGdp = np.zeros(n_p)
    if cls is DaeClass.HESSENBERG2:
        last = forward.traces[-1]
        dGdp += _hi2.hi2_terminal_gradient_term(
            spec, last.mode, last, last.t_end, p,
            spec.mode_quadrature(last.mode))

    acc_a = np.zeros(n_z)
    acc_b = np.zeros(n_y)
    segments = []
    jump_log = []
    lam = lam_f
    mu = mu_f
    ntraces = len(forward.traces)
    for i in range(ntraces - 1, -1, -1):
        trace = forward.traces[i]
        quad = spec.mode_quadrature(trace.mode)
        t_hi, t_lo = trace.t_end, trace.t_start
        if full01:
            sysA = _AdjFullyImplicitSystem(spec, trace, p, quad, t_hi)
            dyn = spec.modes[trace.mode].dynamics
            yd = trace.eval_ydot(t_hi)
            y = trace.eval_y(t_hi)
            z = trace.eval_z(t_hi)
            a = (yd, y, z, trace.ystar, trace.zstar, p, t_hi)
            fyd, _, _ = _m.eval_state_partials(dyn, *a)
            y0b = fyd.T @ lam
            z0b = lam
        else:
            sysA = _AdjSplitSystem(spec, trace, p, quad, t_hi)
            y0b = lam
            z0b = mu
        q0 = np.zeros(sysA.nq)
        ydot0 = -sysA.residual(np.zeros(sysA.ny), y0b, z0b, 0.0)[:sysA.ny]
        res = _int._integrate_window(sysA, 0.0, t_hi - t_lo, y0b, z0b, None,
                                     None, q0, ydot0, tol)
        segments.append(_segment_rows(res.records, t_hi, full01, n_y))
        if memory:
            iq = res.q[:n_y]
            jq = res.q[n_y:n_y + n_z]
            dGdp += res.q[n_y + n_z:]
        else:
            dGdp += res.q
        if full01:
            nu_end = res.y
            lam = res.z
            mu = None
        else:
            lam = res.y
            mu = res.z
        if i == 0:
            break
        rec = forward.transitions[i - 1]
        trace_before = forward.traces[i - 1]
        g_minus = float(spec.mode_quadrature(rec.mode_before).g(
            rec.y_minus, rec.z_minus, p, rec.t))
        g_plus = float(spec.mode_quadrature(rec.mode_after).g(
            rec.y_plus, rec.z_plus, p, rec.t))
        if memory:
            jr = adjoint_jump(spec, rec, lam, mu, None, g_minus, g_plus, p,
                              trace_before=trace_before, quads=(iq, jq),
                              accums=(acc_a, acc_b))
            acc_a, acc_b = jr.A, jr.B
        else:
            jl = build_jump_linearization(spec, rec, p,
                                          trace_before=trace_before,
                                          lam_plus=lam, g_minus=g_minus,
                                          g_plus=g_plus)
            jr = adjoint_jump(spec, rec, lam, mu, jl, g_minus, g_plus, p,
                              trace_before=trace_before)
        dGdp += jr.grad_increment
        jump_log.append({"t": rec.t, "lam_plus": lam.copy(),
                         "lam_minus": jr.lam_minus.copy(),
                         "mu_plus": None if mu is None else mu.copy(),
                         "mu_minus": None if jr.mu_minus is None
                         else jr.mu_minus.copy()})
        lam = jr.lam_minus
        mu = jr.mu_minus

    # boundary terms at t0 for parameter-dependent initial states
    st0 = _initial_state_of(forward)
    mem0 = (forward.traces[0].ystar, forward.traces[0].zstar)
    sens0 = _fsa.FsaRunState.initialize(spec, st0, mem0, p, tol)
    s0, w0 = sens0.S, sens0.W
    if np.any(s0) or (memory and np.any(w0)):
        if full01:
            dGdp -= nu_end @ s0
        elif cls is DaeClass.HESSENBERG2:
            dGdp += lam @ s0
        else:
            dGdp += (lam + iq) @ s0 + jq @ w0
    segments.reverse()
    return AsaResult(spec=spec, p=p, segments=segments, jumps=jump_log,
                     G=forward.G, dGdp=dGdp, lam0=lam, mu0=mu)


def _initial_state_of(forward: ForwardResult) -> State:
    rec0 = forward.traces[0].steps[0]
    return State(rec0.ydot_left.copy(), rec0.y_left.copy(),
                 rec0.z_left.copy())


def _segment_rows(records, t_hi, full01, n_y):
    """Per-mode adjoint samples as (t, lam, mu) rows, ascending in t."""
    rows = []
    for k, rec in enumerate(records):
        for sigma, lam_b, nu_b in (((rec.t_left, rec.z_left, rec.y_left),)
                                   if k else ((rec.t_left, rec.z_left,
                                               rec.y_left),)):
            pass
    # walk once: left endpoint of the first record, then all right endpoints
    out = []
    if records:
        first = records[0]
        out.append((t_hi - first.t_left, first.z_left.copy(),
                    first.y_left.copy()))
        for rec in records:
            out.append((t_hi - rec.t_right, rec.z_right.copy(),
                        rec.y_right.copy()))
    rows = []
    for t, zb, yb in out:
        if full01:
            rows.append((t, zb, None))
        else:
            rows.append((t, yb, zb))
    rows.sort(key=lambda r: r[0])
    return rows
