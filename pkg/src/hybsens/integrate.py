"""Implicit variable-step time integration within a mode, guard-crossing
location, consistent (re)initialization at transitions, and dense output
storage for the backward pass.

The stepper is a 3-stage stiffly accurate, L-stable singly diagonally
implicit Runge-Kutta method (order 3 propagated, order 2 embedded estimate,
error filtered through the stage iteration matrix).  It operates on a small
adapter protocol (:class:`DaeSystem`) so that the plain state system, the
state+sensitivity system and the backward adjoint systems all share one
stepping core.  Sensitivity columns are linear in the stage unknowns given
the state, so each stage performs one Newton solve on the state block
followed by one exact multi-right-hand-side linear solve for the appended
columns; the result is the exact solution of the simultaneously augmented
stage system.

A single integration run owns its mutable workspace; runs on distinct specs
or distinct parameter vectors may execute concurrently.
"""

from __future__ import annotations

import bisect
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.optimize import brentq

from . import model as _m
from .errors import (ChatteringLimit, ConsistencyError, EvaluationFailure,
                     MaxStepsExceeded, MultipleCrossingsWarning,
                     NewtonDivergence, NoSignChange, SingularIterationMatrix,
                     SingularTransition, StepSizeUnderflow)
from .model import DaeClass, HybridSystemSpec, ModeDynamics, Point

__all__ = [
    "Tolerances",
    "State",
    "StepRecord",
    "TransitionRecord",
    "ModeTrace",
    "ForwardResult",
    "step",
    "integrate_mode",
    "locate_event",
    "consistent_init",
    "initialize_state",
    "simulate",
]

# SDIRK 3(2), Alexander's stiffly accurate L-stable 3-stage method.
_G = 0.4358665215084589994160194511935568425293
_C = (_G, (1.0 + _G) / 2.0, 1.0)
_B1 = -1.5 * _G * _G + 4.0 * _G - 0.25
_B2 = 1.5 * _G * _G - 5.0 * _G + 1.25
_A = ((), ((1.0 - _G) / 2.0,), (_B1, _B2))
_B = (_B1, _B2, _G)
_BH1 = (0.5 - _C[1]) / (_G - _C[1])
_BHAT = (_BH1, 1.0 - _BH1, 0.0)
_E = tuple(b - bh for b, bh in zip(_B, _BHAT))
_NSCAN = 9


@dataclass(frozen=True)
class Tolerances:
    """Integration and event tolerances.

    ``rtol``/``atol`` control the weighted RMS step error norm over the
    differential states, appended sensitivity columns and quadratures.
    Event location refines until ``|h| <= eps_event * (1 + hscale)`` with
    ``hscale`` the running guard magnitude in the mode, and the time bracket
    is below ``eps_time * max(1, |t|)``.
    """

    rtol: float = 1e-8
    atol: float = 1e-12
    eps_event: float = 1e-10
    eps_time: float = 1e-12
    max_newton: int = 12
    newton_tol: float = 1e-2
    max_steps: int = 500_000
    max_transitions: int = 10_000

    def consistency_tol(self, state_norm: float) -> float:
        return max(self.atol, self.rtol * state_norm)


@dataclass
class State:
    """Full continuous state (ydot, y, z) at one time."""

    ydot: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def copy(self) -> "State":
        return State(self.ydot.copy(), self.y.copy(), self.z.copy())

    @property
    def norm(self) -> float:
        vals = np.concatenate([self.y, self.z])
        return float(np.linalg.norm(vals)) if vals.size else 0.0


class DaeSystem:
    """Adapter protocol for the stepping core.

    ``ny`` differential and ``nz`` algebraic unknowns form the nonlinear
    core block; ``nlin`` appended columns satisfy the linear equations
    ``F_ydot Sdot + F_y S + F_z W + forcing = 0`` with the same coefficient
    matrices; ``nq`` quadrature states have explicit derivatives.
    """

    ny: int
    nz: int
    nlin: int = 0
    nq: int = 0

    def residual(self, ydot, y, z, t):  # pragma: no cover - interface
        raise NotImplementedError

    def jac(self, ydot, y, z, t):  # pragma: no cover - interface
        raise NotImplementedError

    def lin_forcing(self, ydot, y, z, t):  # pragma: no cover - interface
        raise NotImplementedError

    def quad_rhs(self, ydot, y, z, t, S, W):  # pragma: no cover - interface
        raise NotImplementedError


class StateSystem(DaeSystem):
    """Plain state integration with the functional quadrature G."""

    def __init__(self, dyn: ModeDynamics, p, ystar, zstar, n_y, n_z,
                 quad: Optional[_m.QuadratureSpec] = None):
        self.dyn = dyn
        self.p = p
        self.ystar = ystar
        self.zstar = zstar
        self.ny = n_y
        self.nz = n_z
        self.nlin = 0
        self.nq = 1 if quad is not None else 0
        self.quad = quad

    def residual(self, ydot, y, z, t):
        return np.asarray(self.dyn.residual(ydot, y, z, self.ystar,
                                            self.zstar, self.p, t), dtype=float)

    def jac(self, ydot, y, z, t):
        return _m.eval_state_partials(self.dyn, ydot, y, z, self.ystar,
                                      self.zstar, self.p, t)

    def quad_rhs(self, ydot, y, z, t, S, W):
        return np.array([self.quad.g(y, z, self.p, t)], dtype=float)


# ---------------------------------------------------------------------------
# Dense output


def _herm(t, tl, tr, yl, yr, dl, dr):
    h = tr - tl
    s = (t - tl) / h
    s2 = s * s
    a = 1.0 + 2.0 * s
    omt = 1.0 - s
    omt2 = omt * omt
    return (a * omt2) * yl + (s * omt2 * h) * dl + (s2 * (3.0 - 2.0 * s)) * yr \
        + (s2 * (s - 1.0) * h) * dr


def _herm_d(t, tl, tr, yl, yr, dl, dr):
    h = tr - tl
    s = (t - tl) / h
    d00 = 6.0 * s * (s - 1.0) / h
    d10 = (1.0 - s) * (1.0 - 3.0 * s)
    d01 = -d00
    d11 = s * (3.0 * s - 2.0)
    return d00 * yl + d10 * dl + d01 * yr + d11 * dr


@dataclass
class StepRecord:
    """Dense output of one accepted step: cubic Hermite on y, linear on z.

    The interpolants reproduce the stored endpoint values exactly.
    """

    t_left: float
    t_right: float
    y_left: np.ndarray
    y_right: np.ndarray
    ydot_left: np.ndarray
    ydot_right: np.ndarray
    z_left: np.ndarray
    z_right: np.ndarray
    S_left: Optional[np.ndarray] = None
    S_right: Optional[np.ndarray] = None
    Sdot_left: Optional[np.ndarray] = None
    Sdot_right: Optional[np.ndarray] = None
    W_left: Optional[np.ndarray] = None
    W_right: Optional[np.ndarray] = None

    def eval_y(self, t):
        return _herm(t, self.t_left, self.t_right, self.y_left, self.y_right,
                     self.ydot_left, self.ydot_right)

    def eval_ydot(self, t):
        return _herm_d(t, self.t_left, self.t_right, self.y_left, self.y_right,
                       self.ydot_left, self.ydot_right)

    def eval_z(self, t):
        if self.z_left.size == 0:
            return self.z_left
        s = (t - self.t_left) / (self.t_right - self.t_left)
        return (1.0 - s) * self.z_left + s * self.z_right

    def eval_S(self, t):
        return _herm(t, self.t_left, self.t_right, self.S_left, self.S_right,
                     self.Sdot_left, self.Sdot_right)

    def eval_W(self, t):
        if self.W_left.size == 0:
            return self.W_left
        s = (t - self.t_left) / (self.t_right - self.t_left)
        return (1.0 - s) * self.W_left + s * self.W_right


@dataclass
class TransitionRecord:
    """States on both sides of one located transition."""

    index: int
    t: float
    mode_before: int
    ydot_minus: np.ndarray
    y_minus: np.ndarray
    z_minus: np.ndarray
    guard_drift: float
    guard_residual: float
    mode_after: Optional[int] = None
    ydot_plus: Optional[np.ndarray] = None
    y_plus: Optional[np.ndarray] = None
    z_plus: Optional[np.ndarray] = None
    init_residual: float = 0.0

    @property
    def state_minus(self) -> State:
        return State(self.ydot_minus, self.y_minus, self.z_minus)

    @property
    def state_plus(self) -> State:
        return State(self.ydot_plus, self.y_plus, self.z_plus)


class ModeTrace:
    """Dense forward solution over one mode plus its terminating record."""

    def __init__(self, mode: int, t_start: float, steps, transition=None,
                 ystar=None, zstar=None):
        self.mode = mode
        self.t_start = t_start
        self.steps = steps
        self.transition = transition
        self.ystar = ystar
        self.zstar = zstar
        self._rights = [r.t_right for r in steps]

    @property
    def t_end(self) -> float:
        return self.steps[-1].t_right if self.steps else self.t_start

    def record_at(self, t: float) -> StepRecord:
        i = bisect.bisect_left(self._rights, t)
        if i >= len(self.steps):
            i = len(self.steps) - 1
        return self.steps[i]

    def eval_y(self, t):
        return self.record_at(t).eval_y(t)

    def eval_ydot(self, t):
        return self.record_at(t).eval_ydot(t)

    def eval_z(self, t):
        return self.record_at(t).eval_z(t)


@dataclass
class ForwardResult:
    """Output of a forward run: dense traces, transitions and G."""

    spec: HybridSystemSpec
    p: np.ndarray
    tol: Tolerances
    traces: list
    transitions: list
    G: float
    state_end: State
    n_steps: int

    @property
    def transition_count(self) -> int:
        return len(self.transitions)


# ---------------------------------------------------------------------------
# Weighted RMS norm


def _wrms(e, ref, rtol, atol):
    if e.size == 0:
        return 0.0
    w = atol + rtol * np.abs(ref)
    return float(np.sqrt(np.mean((e / w) ** 2)))


# ---------------------------------------------------------------------------
# One SDIRK step


class _StepOut:
    __slots__ = ("y", "z", "S", "W", "q", "ydot", "Sdot", "err")

    def __init__(self, y, z, S, W, q, ydot, Sdot, err):
        self.y = y
        self.z = z
        self.S = S
        self.W = W
        self.q = q
        self.ydot = ydot
        self.Sdot = Sdot
        self.err = err


def _attempt_step(sys: DaeSystem, t, h, y, z, S, W, q, ydot0, tol: Tolerances,
                  newton_only=False):
    """One step attempt from t to t+h.  Returns _StepOut or None when the
    stage Newton iteration fails to converge."""
    ny, nz, nlin, nq = sys.ny, sys.nz, sys.nlin, sys.nq
    hg = h * _G
    kdot = []
    skdot = []
    qdot = []
    Yl = Zl = Sl = Wl = None
    lu_last = None
    wy = tol.atol + tol.rtol * np.abs(y)
    wz = tol.atol + tol.rtol * np.abs(z)
    for i in range(3):
        ts = t + _C[i] * h
        ypred = y.copy()
        for j, aij in enumerate(_A[i]):
            ypred += (h * aij) * kdot[j]
        Y = y + (_C[i] * h) * ydot0
        Z = Zl.copy() if Zl is not None else z.copy()
        ok = False
        prev = None
        for _ in range(tol.max_newton):
            Ydot = (Y - ypred) / hg
            r = sys.residual(Ydot, Y, Z, ts)
            fyd, fy, fz = sys.jac(Ydot, Y, Z, ts)
            m = np.hstack([fyd / hg + fy, fz]) if nz else (fyd / hg + fy)
            try:
                lu = lu_factor(m)
            except Exception as exc:
                raise SingularIterationMatrix(
                    f"stage iteration matrix singular at t={ts}") from exc
            d = lu_solve(lu, -r)
            Y = Y + d[:ny]
            Z = Z + d[ny:]
            nrm = float(np.sqrt(np.mean((d[:ny] / wy) ** 2))) if ny else 0.0
            if nz:
                nrm = max(nrm, float(np.sqrt(np.mean((d[ny:] / wz) ** 2))))
            if nrm <= tol.newton_tol:
                ok = True
                break
            if prev is not None and nrm > 4.0 * prev and nrm > 1.0:
                break
            prev = nrm
        if not ok:
            return None
        Ydot = (Y - ypred) / hg
        fyd, fy, fz = sys.jac(Ydot, Y, Z, ts)
        m = np.hstack([fyd / hg + fy, fz]) if nz else (fyd / hg + fy)
        try:
            lu_last = lu_factor(m)
        except Exception as exc:
            raise SingularIterationMatrix(
                f"stage iteration matrix singular at t={ts}") from exc
        if nlin:
            spred = S.copy()
            for j, aij in enumerate(_A[i]):
                spred += (h * aij) * skdot[j]
            forcing = sys.lin_forcing(Ydot, Y, Z, ts)
            rhs = fyd @ (spred / hg) - forcing
            sol = lu_solve(lu_last, rhs)
            Si = sol[:ny]
            Wi = sol[ny:]
            skdot.append((Si - spred) / hg)
        else:
            Si = S
            Wi = W
        if nq:
            qdot.append(np.asarray(sys.quad_rhs(Ydot, Y, Z, ts, Si, Wi),
                                   dtype=float))
        kdot.append(Ydot)
        Yl, Zl, Sl, Wl = Y, Z, Si, Wi

    ynew, znew, Snew, Wnew = Yl, Zl, Sl, Wl
    if nq:
        qnew = q + h * (_B[0] * qdot[0] + _B[1] * qdot[1] + _B[2] * qdot[2])
        eq = h * (_E[0] * qdot[0] + _E[1] * qdot[1] + _E[2] * qdot[2])
    else:
        qnew = q
        eq = np.zeros(0)
    if newton_only:
        return _StepOut(ynew, znew, Snew, Wnew, qnew, kdot[2],
                        skdot[2] if nlin else None, 0.0)

    ey = h * (_E[0] * kdot[0] + _E[1] * kdot[1] + _E[2] * kdot[2])
    # filter the raw estimate through the last stage matrix so that stiff
    # components are not overweighted
    if nlin:
        es = h * (_E[0] * skdot[0] + _E[1] * skdot[1] + _E[2] * skdot[2])
        rhs = np.zeros((ny + nz, 1 + nlin))
        rhs[:ny, 0] = ey / hg
        rhs[:ny, 1:] = es / hg
        dall = lu_solve(lu_last, rhs)
        dy = dall[:ny, 0]
        ds = dall[:ny, 1:]
    else:
        rhs = np.zeros(ny + nz)
        rhs[:ny] = ey / hg
        dy = lu_solve(lu_last, rhs)[:ny]
        ds = np.zeros((ny, 0))
    err = _wrms(dy, np.maximum(np.abs(y), np.abs(ynew)), tol.rtol, tol.atol) ** 2 * ny
    n_tot = ny
    if nlin:
        refs = np.maximum(np.abs(S), np.abs(Snew))
        err += _wrms(ds.ravel(), refs.ravel(), tol.rtol, tol.atol) ** 2 * ds.size
        n_tot += ds.size
    if nq:
        err += _wrms(eq, np.maximum(np.abs(q), np.abs(qnew)),
                     tol.rtol, tol.atol) ** 2 * nq
        n_tot += nq
    err = np.sqrt(err / max(n_tot, 1))
    return _StepOut(ynew, znew, Snew, Wnew, qnew, kdot[2],
                    skdot[2] if nlin else None, float(err))


def _initial_h(span, y, ydot, tol):
    w = tol.atol + tol.rtol * np.abs(y)
    d0 = float(np.sqrt(np.mean((y / w) ** 2))) if y.size else 1.0
    d1 = float(np.sqrt(np.mean((ydot / w) ** 2))) if y.size else 1.0
    h0 = 0.01 * d0 / d1 if d1 > 0 else span / 100.0
    return min(max(h0, 1e-8 * span), span / 10.0)


# ---------------------------------------------------------------------------
# Window integration with optional guard monitoring


class _WindowResult:
    __slots__ = ("records", "t", "y", "z", "S", "W", "q", "ydot", "Sdot",
                 "event_t", "event_hval", "n_steps")

    def __init__(self, **kw):
        for k in self.__slots__:
            setattr(self, k, kw.get(k))


def _integrate_window(sys: DaeSystem, t0, t1, y, z, S, W, q, ydot,
                      tol: Tolerances, guard_eval=None, h_first=None):
    """Step from t0 toward t1, stopping early at the first armed guard
    crossing.  guard_eval(rec, t) evaluates the scalar guard on dense output.
    """
    t = t0
    span = t1 - t0
    h = h_first if h_first is not None else _initial_h(span, y, ydot, tol)
    h = min(h, span)
    records = []
    armed = False
    sign = 0.0
    hscale = 0.0
    n_steps = 0
    tiny = 1e-14 * max(1.0, abs(t1))
    Sdot = np.zeros_like(S) if S is not None else None
    while t1 - t > tiny:
        h = min(h, t1 - t)
        out = None
        for _ in range(60):
            out = _attempt_step(sys, t, h, y, z, S, W, q, ydot, tol)
            if out is None:
                h *= 0.5
            elif out.err > 1.0:
                h *= min(0.9 * out.err ** (-1.0 / 3.0), 0.9)
                out = None
            else:
                break
            if h < 1e-14 * max(1.0, abs(t)):
                raise StepSizeUnderflow(f"step size underflow at t={t}")
        if out is None:
            raise NewtonDivergence(f"stage iteration kept failing at t={t}")
        n_steps += 1
        if n_steps > tol.max_steps:
            raise MaxStepsExceeded(f"more than {tol.max_steps} steps in mode")
        rec = StepRecord(t, t + h, y.copy(), out.y.copy(), ydot.copy(),
                         out.ydot.copy(), z.copy(), out.z.copy())
        if S is not None:
            rec.S_left, rec.S_right = S.copy(), out.S.copy()
            rec.Sdot_left, rec.Sdot_right = Sdot.copy(), out.Sdot.copy()
            rec.W_left, rec.W_right = W.copy(), out.W.copy()
        event_t = None
        if guard_eval is not None:
            ts = np.linspace(t, t + h, _NSCAN)
            gv = np.array([guard_eval(rec, tt) for tt in ts])
            hscale = max(hscale, float(np.max(np.abs(gv))))
            eps_h = tol.eps_event * (1.0 + hscale)
            bracket = None
            changes = 0
            s_local = sign
            armed_local = armed
            for k in range(_NSCAN):
                if not armed_local:
                    if abs(gv[k]) > eps_h:
                        armed_local = True
                        s_local = np.sign(gv[k])
                    continue
                if gv[k] != 0.0 and np.sign(gv[k]) == s_local:
                    continue
                changes += 1
                if bracket is None:
                    bracket = (ts[k - 1], ts[k])
                s_local = np.sign(gv[k]) if gv[k] != 0.0 else -s_local
            armed, sign = armed_local, s_local
            if changes > 1:
                warnings.warn(
                    f"{changes} guard sign changes within one step near "
                    f"t={t:.6g}; using the leftmost",
                    MultipleCrossingsWarning)
            if bracket is not None:
                gfun = lambda tt: guard_eval(rec, tt)  # noqa: E731
                a, b = bracket
                if gfun(b) == 0.0:
                    event_t = b
                else:
                    event_t = brentq(gfun, a, b, xtol=tol.eps_time,
                                     rtol=4.0 * np.finfo(float).eps)
        if event_t is not None:
            eps_h = tol.eps_event * (1.0 + hscale)
            tstar = event_t
            out2 = None
            hval = None
            right_cap = t + h
            for _ in range(8):
                dt = tstar - t
                out2 = _attempt_step(sys, t, dt, y, z, S, W, q, ydot, tol,
                                     newton_only=True)
                if out2 is None:
                    break
                rec2 = StepRecord(t, tstar, y.copy(), out2.y, ydot.copy(),
                                  out2.ydot, z.copy(), out2.z)
                hval = guard_eval(rec2, tstar)
                if abs(hval) <= eps_h:
                    break
                dtp = 1e-7 * max(abs(tstar - t), 1e-12)
                slope = (hval - guard_eval(rec2, tstar - dtp)) / dtp
                if slope == 0.0:
                    break
                tstar = min(max(tstar - hval / slope, t + 1e-15), right_cap)
            if out2 is None:
                # polishing step failed; fall back to the interpolated state
                out2 = out
                tstar = event_t
                rec.t_right = tstar
                rec.y_right = rec.eval_y(tstar)
                rec.ydot_right = rec.eval_ydot(tstar)
                rec.z_right = rec.eval_z(tstar)
                if S is not None:
                    rec.S_right = rec.eval_S(tstar)
                    rec.W_right = rec.eval_W(tstar)
                records.append(rec)
                hval = guard_eval(rec, tstar)
                return _WindowResult(records=records, t=tstar,
                                     y=rec.y_right, z=rec.z_right,
                                     S=rec.S_right, W=rec.W_right,
                                     q=out.q, ydot=rec.ydot_right,
                                     Sdot=rec.Sdot_right, event_t=tstar,
                                     event_hval=hval, n_steps=n_steps)
            rec2 = StepRecord(t, tstar, y.copy(), out2.y.copy(), ydot.copy(),
                              out2.ydot.copy(), z.copy(), out2.z.copy())
            if S is not None:
                rec2.S_left, rec2.S_right = S.copy(), out2.S.copy()
                rec2.Sdot_left, rec2.Sdot_right = Sdot.copy(), out2.Sdot.copy()
                rec2.W_left, rec2.W_right = W.copy(), out2.W.copy()
            records.append(rec2)
            return _WindowResult(records=records, t=tstar, y=out2.y,
                                 z=out2.z, S=out2.S, W=out2.W, q=out2.q,
                                 ydot=out2.ydot, Sdot=out2.Sdot,
                                 event_t=tstar, event_hval=hval,
                                 n_steps=n_steps)
        records.append(rec)
        t = t + h
        y, z, q, ydot = out.y, out.z, out.q, out.ydot
        if S is not None:
            S, W, Sdot = out.S, out.W, out.Sdot
        h = h * min(max(0.9 * out.err ** (-1.0 / 3.0), 0.2), 5.0) \
            if out.err > 0.0 else h * 5.0
    return _WindowResult(records=records, t=t1, y=y, z=z, S=S, W=W, q=q,
                         ydot=ydot, Sdot=Sdot, event_t=None, event_hval=None,
                         n_steps=n_steps)


# ---------------------------------------------------------------------------
# Public single-step and single-mode operations


def step(dyn: ModeDynamics, state: State, t: float, dt: float,
         tol: Optional[Tolerances] = None, p=None, ystar=None, zstar=None):
    """Advance one implicit step of size ``dt``.

    Returns ``(new_state, error_estimate)`` in the weighted error norm.
    Raises :class:`NewtonDivergence` if the stage iteration does not
    converge for this exact ``dt``.
    """
    tol = tol or Tolerances()
    p = np.asarray(p if p is not None else [], dtype=float)
    ystar = state.y if ystar is None else ystar
    zstar = state.z if zstar is None else zstar
    sys = StateSystem(dyn, p, ystar, zstar, state.y.size, state.z.size)
    out = _attempt_step(sys, t, dt, state.y, state.z, None, None,
                        np.zeros(0), state.ydot, tol)
    if out is None:
        raise NewtonDivergence(f"stage iteration failed for dt={dt}")
    return State(out.ydot, out.y, out.z), out.err


def integrate_mode(spec: HybridSystemSpec, mode: int, state: State,
                   t_start: float, t_stop: float,
                   tol: Optional[Tolerances] = None, p=None,
                   ystar=None, zstar=None) -> ModeTrace:
    """Adaptively integrate one mode until its guard crosses or t_stop.

    The returned trace carries a partial :class:`TransitionRecord` (minus
    side only) when a crossing terminated the mode.
    """
    tol = tol or Tolerances()
    p = np.asarray(p if p is not None else spec.p_nominal, dtype=float)
    m = spec.modes[mode]
    ystar = state.y if ystar is None else ystar
    zstar = state.z if zstar is None else zstar
    sys = StateSystem(m.dynamics, p, ystar, zstar, spec.n_y, spec.n_z,
                      quad=spec.mode_quadrature(mode))
    guard_eval = None
    if m.guard is not None:
        guard_eval = _make_guard_eval(m.guard, p)
    res = _integrate_window(sys, t_start, t_stop, state.y, state.z, None,
                            None, np.zeros(sys.nq), state.ydot, tol,
                            guard_eval=guard_eval)
    transition = None
    if res.event_t is not None:
        st_minus = State(res.ydot, res.y, res.z)
        drift = _guard_drift(spec, mode, st_minus, res.event_t, p,
                             ystar, zstar)
        transition = TransitionRecord(
            index=-1, t=res.event_t, mode_before=mode,
            ydot_minus=res.ydot, y_minus=res.y, z_minus=res.z,
            guard_drift=drift, guard_residual=abs(res.event_hval))
    return ModeTrace(mode, t_start, res.records, transition,
                     ystar=np.array(ystar, copy=True),
                     zstar=np.array(zstar, copy=True))


def _make_guard_eval(guard, p):
    def geval(rec, tt):
        return float(guard.h(rec.eval_ydot(tt), rec.eval_y(tt),
                             rec.eval_z(tt), p, tt))
    return geval


def _guard_drift(spec, mode, st: State, t, p, ystar, zstar) -> float:
    m = spec.modes[mode]
    pt = Point(st.ydot, st.y, st.z, ystar, zstar, p, t)
    yddot, zdot = _m.compute_hidden_derivatives(m.dynamics, pt, spec.dae_class)
    h_ydot, h_y, h_z, h_p, h_t = _m.guard_partials(m.guard, pt)
    return float(h_ydot @ yddot + h_y @ st.ydot + h_z @ zdot + h_t)


def locate_event(record: StepRecord, guard, p, tol: Optional[Tolerances] = None,
                 armed_sign: Optional[float] = None) -> float:
    """Locate the leftmost guard zero-crossing on one step's dense output.

    Raises :class:`NoSignChange` when the guard does not change sign on the
    record's sampling.  Emits :class:`MultipleCrossingsWarning` when more
    than one change is present.
    """
    tol = tol or Tolerances()
    geval = _make_guard_eval(guard, p)
    ts = np.linspace(record.t_left, record.t_right, _NSCAN)
    gv = np.array([geval(record, tt) for tt in ts])
    sign = armed_sign if armed_sign is not None else np.sign(gv[0])
    bracket = None
    changes = 0
    for k in range(_NSCAN):
        if gv[k] != 0.0 and np.sign(gv[k]) == sign:
            continue
        if sign == 0.0:
            sign = np.sign(gv[k])
            continue
        changes += 1
        if bracket is None:
            bracket = (ts[k - 1], ts[k])
        sign = np.sign(gv[k]) if gv[k] != 0.0 else -sign
    if bracket is None:
        raise NoSignChange("guard does not change sign on this step")
    if changes > 1:
        warnings.warn("multiple guard sign changes within one step; using "
                      "the leftmost", MultipleCrossingsWarning)
    a, b = bracket
    gb = geval(record, b)
    if gb == 0.0:
        return float(b)
    return float(brentq(lambda tt: geval(record, tt), a, b,
                        xtol=tol.eps_time, rtol=4.0 * np.finfo(float).eps))


# ---------------------------------------------------------------------------
# Newton helper and consistent initialization


def _newton(fun, jacfun, x0, tol_abs, maxit=30,
            singular_exc=SingularTransition):
    x = np.asarray(x0, dtype=float).copy()
    for _ in range(maxit):
        r = np.asarray(fun(x), dtype=float)
        j = np.atleast_2d(np.asarray(jacfun(x), dtype=float))
        try:
            d = np.linalg.solve(j, -r)
        except np.linalg.LinAlgError as exc:
            raise singular_exc("singular matrix in nonlinear solve") from exc
        x = x + d
        if np.max(np.abs(d)) <= tol_abs * (1.0 + np.max(np.abs(x))):
            return x
    raise NewtonDivergence("nonlinear solve did not converge")


def _full_residual_norm(dyn, st: State, ystar, zstar, p, t) -> float:
    r = np.asarray(dyn.residual(st.ydot, st.y, st.z, ystar, zstar, p, t),
                   dtype=float)
    return float(np.max(np.abs(r))) if r.size else 0.0


def consistent_init(spec: HybridSystemSpec, mode_from: int, before: State,
                    t: float, tol: Optional[Tolerances] = None, p=None,
                    memory=None):
    """Solve the transition system for the state entering the next mode.

    Returns ``(after_state, target_mode)``.  Raises
    :class:`SingularTransition` when the transition matrix is numerically
    singular and :class:`ConsistencyError` when the resulting state does not
    satisfy the full residual of the target mode.
    """
    tol = tol or Tolerances()
    p = np.asarray(p if p is not None else spec.p_nominal, dtype=float)
    tmap = spec.modes[mode_from].transition
    if tmap is None:
        raise SingularTransition(f"mode {mode_from} has no transition map")
    target = tmap.target
    dyn_t = spec.modes[target].dynamics
    n_y, n_z = spec.n_y, spec.n_z
    ntol = 1e-3 * tol.consistency_tol(1.0 + before.norm)

    if spec.dae_class is DaeClass.HESSENBERG2:
        from . import hi2 as _hi2
        after = _hi2.hi2_transition(spec, mode_from, before, t, tol=tol, p=p)
        new_mem = (after.y.copy(), after.z.copy())
    elif spec.dae_class is DaeClass.INDEX1_MEMORY:
        after = _memory_transition(spec, tmap, dyn_t, before, t, p, ntol,
                                   memory)
        new_mem = (after.y.copy(), after.z.copy())
    else:
        bargs = (before.ydot, before.y, before.z)

        def fun(x):
            yd, yy, zz = x[:n_y], x[n_y:2 * n_y], x[2 * n_y:]
            rt = np.asarray(tmap.T(yd, yy, zz, *bargs, p, t), dtype=float)
            rf = np.asarray(dyn_t.residual(yd, yy, zz, yy, zz, p, t),
                            dtype=float)
            return np.concatenate([rt, rf])

        def jac(x):
            yd, yy, zz = x[:n_y], x[n_y:2 * n_y], x[2 * n_y:]
            tp = _m.map_partials(tmap, (yd, yy, zz), bargs, p, t)
            fyd, fy, fz = _m.eval_state_partials(dyn_t, yd, yy, zz, yy, zz,
                                                 p, t)
            top = np.hstack([tp["T_ydot_plus"], tp["T_y_plus"], tp["T_z_plus"]])
            bot = np.hstack([fyd, fy, fz])
            return np.vstack([top, bot])

        x0 = np.concatenate([before.ydot, before.y, before.z])
        x = _newton(fun, jac, x0, ntol)
        after = State(x[:n_y], x[n_y:2 * n_y], x[2 * n_y:])
        new_mem = (after.y.copy(), after.z.copy())

    res = _full_residual_norm(dyn_t, after, new_mem[0], new_mem[1], p, t)
    ctol = tol.consistency_tol(1.0 + after.norm)
    if res > ctol:
        raise ConsistencyError(
            f"post-transition residual {res:.3e} exceeds {ctol:.3e}")
    return after, target


def _memory_transition(spec, tmap, dyn_t, before: State, t, p, ntol, memory):
    n_y, n_z = spec.n_y, spec.n_z
    bargs = (before.ydot, before.y, before.z)
    if tmap.dim == n_y + n_z:
        # T determines y+ and z+ jointly; memory freezes to those values
        def fun(x):
            yy, zz = x[:n_y], x[n_y:]
            return np.asarray(tmap.T(before.ydot, yy, zz, *bargs, p, t),
                              dtype=float)

        def jac(x):
            yy, zz = x[:n_y], x[n_y:]
            tp = _m.map_partials(tmap, (before.ydot, yy, zz), bargs, p, t)
            return np.hstack([tp["T_y_plus"], tp["T_z_plus"]])

        x = _newton(fun, jac, np.concatenate([before.y, before.z]), ntol)
        y_p, z_p = x[:n_y], x[n_y:]
    else:
        def fun(x):
            return np.asarray(tmap.T(before.ydot, x, before.z, *bargs, p, t),
                              dtype=float)

        def jac(x):
            tp = _m.map_partials(tmap, (before.ydot, x, before.z), bargs, p, t)
            return tp["T_y_plus"]

        y_p = _newton(fun, jac, before.y.copy(), ntol)

        # algebraic states from k with memory tied to the new values
        def kfun(zz):
            r = np.asarray(dyn_t.residual(before.ydot, y_p, zz, y_p, zz, p, t),
                           dtype=float)
            return r[n_y:]

        def kjac(zz):
            _, _, fz = _m.eval_state_partials(dyn_t, before.ydot, y_p, zz,
                                              y_p, zz, p, t)
            _, _, fzs = _m.eval_forcing_partials(dyn_t, before.ydot, y_p, zz,
                                                 y_p, zz, p, t)
            return fz[n_y:, :] + fzs[n_y:, :]

        z_p = _newton(kfun, kjac, before.z.copy(), ntol)

    # rank check of the consistency matrix [T+; k-rows] at the new point
    tp = _m.map_partials(tmap, (before.ydot, y_p, z_p), bargs, p, t)
    fyd, fy, fz = _m.eval_state_partials(dyn_t, before.ydot, y_p, z_p,
                                         y_p, z_p, p, t)
    stack = np.vstack([np.hstack([tp["T_y_plus"], tp["T_z_plus"]]),
                       np.hstack([fy[n_y:, :], fz[n_y:, :]])])
    sv = np.linalg.svd(stack, compute_uv=False)
    if sv[-1] <= 1e-12 * max(1.0, sv[0]):
        raise SingularTransition("transition/algebraic consistency matrix "
                                 "is rank deficient")

    # derivatives entering the new mode
    def ffun(yd):
        r = np.asarray(dyn_t.residual(yd, y_p, z_p, y_p, z_p, p, t),
                       dtype=float)
        return r[:n_y]

    def fjac(yd):
        fyd2, _, _ = _m.eval_state_partials(dyn_t, yd, y_p, z_p, y_p, z_p,
                                            p, t)
        return fyd2[:n_y, :]

    yd_p = _newton(ffun, fjac, before.ydot.copy(), ntol)
    return State(yd_p, y_p, z_p)


# ---------------------------------------------------------------------------
# Initialization at t0


def initialize_state(spec: HybridSystemSpec, tol: Optional[Tolerances] = None,
                     p=None):
    """Compute a consistent initial state and the initial mode index."""
    tol = tol or Tolerances()
    p = np.asarray(p if p is not None else spec.p_nominal, dtype=float)
    t0 = spec.t0
    n_y, n_z = spec.n_y, spec.n_z

    if spec.dae_class is DaeClass.HESSENBERG2:
        from . import hi2 as _hi2
        st = _hi2.hi2_initialize(spec, t0, tol=tol, p=p)
        mode0 = _initial_mode(spec, st, p, t0)
        return st, mode0

    mode0_guess = spec.initial_mode if isinstance(spec.initial_mode, int) else 0
    dyn = spec.modes[mode0_guess].dynamics
    ic = spec.initial
    ntol = 1e-3 * max(tol.atol, tol.rtol)

    if isinstance(ic, _m.ExplicitIC):
        y0 = np.asarray(ic.y0, dtype=float).copy()
        z_known = ic.z0 is not None or n_z == 0
        z0 = np.asarray(ic.z0, dtype=float).copy() if ic.z0 is not None \
            else np.zeros(n_z)
        yd0 = np.asarray(ic.ydot0, dtype=float).copy() \
            if ic.ydot0 is not None else np.zeros(n_y)

        if ic.ydot0 is None and z_known and n_z:
            # split classes: the first n_y rows determine ydot
            def fun2(yd):
                r = np.asarray(dyn.residual(yd, y0, z0, y0, z0, p, t0),
                               dtype=float)
                return r[:n_y]

            def jac2(yd):
                fyd, _, _ = _m.eval_state_partials(dyn, yd, y0, z0, y0,
                                                   z0, p, t0)
                return fyd[:n_y, :]

            yd0 = _newton(fun2, jac2, yd0, ntol,
                          singular_exc=SingularTransition)
        elif ic.ydot0 is None or not z_known:
            # joint solve of the full residual for (ydot, z)
            def fun(x):
                yd, zz = x[:n_y], x[n_y:]
                return np.asarray(dyn.residual(yd, y0, zz, y0, zz, p, t0),
                                  dtype=float)

            def jac(x):
                yd, zz = x[:n_y], x[n_y:]
                fyd, fy, fz = _m.eval_state_partials(dyn, yd, y0, zz, y0, zz,
                                                     p, t0)
                if spec.dae_class is DaeClass.INDEX1_MEMORY and n_z:
                    _, _, fzs = _m.eval_forcing_partials(
                        dyn, yd, y0, zz, y0, zz, p, t0)
                    fz = fz + fzs
                return np.hstack([fyd, fz])

            x = _newton(fun, jac, np.concatenate([yd0, z0]), ntol,
                        singular_exc=SingularTransition)
            yd0, z0 = x[:n_y], x[n_y:]
        st = State(yd0, y0, z0)
    else:
        def fun(x):
            yd, yy, zz = x[:n_y], x[n_y:2 * n_y], x[2 * n_y:]
            rt = np.asarray(ic.T0(yd, yy, p, t0), dtype=float)
            rf = np.asarray(dyn.residual(yd, yy, zz, yy, zz, p, t0),
                            dtype=float)
            return np.concatenate([rt, rf])

        def jac(x):
            yd, yy, zz = x[:n_y], x[n_y:2 * n_y], x[2 * n_y:]
            t0_yd, t0_y = _ic_partials(ic, yd, yy, p, t0)
            fyd, fy, fz = _m.eval_state_partials(dyn, yd, yy, zz, yy, zz,
                                                 p, t0)
            top = np.hstack([t0_yd, t0_y, np.zeros((ic.dim, n_z))])
            bot = np.hstack([fyd, fy, fz])
            return np.vstack([top, bot])

        x0 = np.concatenate([np.zeros(n_y), np.zeros(n_y), np.zeros(n_z)])
        x = _newton(fun, jac, x0, ntol)
        st = State(x[:n_y], x[n_y:2 * n_y], x[2 * n_y:])

    mode0 = _initial_mode(spec, st, p, t0)
    res = _full_residual_norm(spec.modes[mode0].dynamics, st, st.y, st.z, p, t0)
    ctol = tol.consistency_tol(1.0 + st.norm)
    if res > ctol:
        raise ConsistencyError(
            f"initial residual {res:.3e} exceeds {ctol:.3e}")
    return st, mode0


def _ic_partials(ic, yd, yy, p, t0):
    """Jacobians of T0 w.r.t. (ydot, y), analytic where supplied."""
    args = (yd, yy, p, t0)
    out = []
    for slot, cb in ((0, ic.T0_ydot), (1, ic.T0_y)):
        x = np.asarray(args[slot], dtype=float)
        if cb is not None:
            out.append(np.asarray(cb(*args), dtype=float).reshape(ic.dim,
                                                                  x.size))
            continue
        cols = np.empty((ic.dim, x.size))
        steps = np.sqrt(np.finfo(float).eps) * np.maximum(1.0, np.abs(x))
        for j in range(x.size):
            ap = list(args)
            am = list(args)
            xp = x.copy()
            xm = x.copy()
            xp[j] += steps[j]
            xm[j] -= steps[j]
            ap[slot] = xp
            am[slot] = xm
            rp = np.asarray(ic.T0(*ap), dtype=float)
            rm = np.asarray(ic.T0(*am), dtype=float)
            cols[:, j] = (rp - rm) / (2 * steps[j])
        out.append(cols)
    return out


def _initial_mode(spec, st: State, p, t0) -> int:
    if isinstance(spec.initial_mode, int):
        return spec.initial_mode
    return int(spec.initial_mode(st.ydot, st.y, st.z, p, t0))


# ---------------------------------------------------------------------------
# Forward drivers


def simulate(spec: HybridSystemSpec, tol: Optional[Tolerances] = None,
             p=None) -> ForwardResult:
    """Integrate the hybrid system over its horizon, recording dense output
    and transitions, and accumulating the functional G."""
    return _drive_forward(spec, tol or Tolerances(), p, with_sens=False)[0]


def _drive_forward(spec: HybridSystemSpec, tol: Tolerances, p,
                   with_sens: bool):
    p = np.asarray(p if p is not None else spec.p_nominal, dtype=float)
    st, mode = initialize_state(spec, tol, p)
    t = spec.t0
    memory = (st.y.copy(), st.z.copy())
    traces = []
    transitions = []
    n_steps = 0
    sens = None
    if with_sens:
        from . import fsa as _fsa
        sens = _fsa.FsaRunState.initialize(spec, st, memory, p, tol)
    q = np.zeros(1 + (spec.n_p if with_sens else 0))
    tiny = 1e-12 * max(1.0, abs(spec.tf))
    h_carry = None
    while True:
        m = spec.modes[mode]
        quad = spec.mode_quadrature(mode)
        if with_sens:
            sysA = sens.make_system(spec, mode, memory, p, quad)
            S, W, Sdot = sens.S, sens.W, sens.Sdot
        else:
            sysA = StateSystem(m.dynamics, p, memory[0], memory[1],
                               spec.n_y, spec.n_z, quad=quad)
            S = W = Sdot = None
        guard_eval = _make_guard_eval(m.guard, p) if m.guard is not None \
            else None
        res = _integrate_window(sysA, t, spec.tf, st.y, st.z, S, W, q,
                                st.ydot, tol, guard_eval=guard_eval,
                                h_first=h_carry)
        n_steps += res.n_steps
        trace = ModeTrace(mode, t, res.records, None,
                          ystar=memory[0].copy(), zstar=memory[1].copy())
        traces.append(trace)
        q = res.q
        if res.event_t is None:
            st = State(res.ydot, res.y, res.z)
            if with_sens:
                sens.S, sens.W, sens.Sdot = res.S, res.W, res.Sdot
            break
        t_i = res.event_t
        st_minus = State(res.ydot, res.y, res.z)
        drift = _guard_drift(spec, mode, st_minus, t_i, p, *memory)
        rec = TransitionRecord(
            index=len(transitions) + 1, t=t_i, mode_before=mode,
            ydot_minus=res.ydot.copy(), y_minus=res.y.copy(),
            z_minus=res.z.copy(), guard_drift=drift,
            guard_residual=abs(res.event_hval))
        after, target = consistent_init(spec, mode, st_minus, t_i, tol, p,
                                        memory=memory)
        rec.mode_after = target
        rec.ydot_plus = after.ydot.copy()
        rec.y_plus = after.y.copy()
        rec.z_plus = after.z.copy()
        rec.init_residual = _full_residual_norm(
            spec.modes[target].dynamics, after, after.y, after.z, p, t_i)
        trace.transition = rec
        transitions.append(rec)
        if with_sens:
            sens.S, sens.W, sens.Sdot = res.S, res.W, res.Sdot
            g_minus = float(quad.g(st_minus.y, st_minus.z, p, t_i))
            g_plus = float(spec.mode_quadrature(target).g(after.y, after.z,
                                                          p, t_i))
            sens.apply_transition(spec, rec, st_minus, after, memory, p,
                                  tol, g_minus, g_plus)
        if spec.dae_class is DaeClass.INDEX1_MEMORY:
            memory = (after.y.copy(), after.z.copy())
        st = after
        t = t_i
        mode = target
        h_carry = None
        if len(transitions) >= tol.max_transitions:
            raise ChatteringLimit(
                f"transition limit {tol.max_transitions} reached at t={t}")
        if spec.tf - t <= tiny:
            break
    result = ForwardResult(spec=spec, p=p, tol=tol, traces=traces,
                           transitions=transitions, G=float(q[0]),
                           state_end=st, n_steps=n_steps)
    return result, sens, q
