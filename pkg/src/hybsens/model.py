"""Problem description data model for hybrid ODE/DAE systems.

A hybrid system is a sequence of continuous modes separated by discrete
transitions.  Each mode is governed by a DAE residual

    F(ydot, y, z, ystar, zstar, p, t) = 0

where ``y`` are differential states, ``z`` algebraic states, ``(ystar,
zstar)`` the memory states frozen at the last transition (ignored unless the
system is of the index-1-with-memory class), and ``p`` time-invariant
parameters.  A scalar guard ``h`` fires a transition at a sign change along
the trajectory; a transition map ``T`` then determines the states entering
the next mode.

All evaluators supplied by users must be pure functions of their arguments:
a :class:`HybridSystemSpec` is immutable after construction and may be shared
freely across concurrently running integrations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import EvaluationFailure, SingularMatrix

__all__ = [
    "DaeClass",
    "JacobianCallbacks",
    "JacobianSet",
    "ModeDynamics",
    "TransitionGuard",
    "TransitionMap",
    "QuadratureSpec",
    "ExplicitIC",
    "ImplicitIC",
    "Mode",
    "HybridSystemSpec",
    "Point",
    "Finding",
    "ValidationReport",
    "eval_jacobians",
    "compute_hidden_derivatives",
    "validate_spec",
]

_SQRT_EPS = math.sqrt(np.finfo(float).eps)


class DaeClass(Enum):
    """Structural class of the per-mode DAE.

    FULLY_IMPLICIT_01  index-0 (ODE) or index-1, requires [F_ydot | F_z]
                       nonsingular along the trajectory.
    HESSENBERG2        ydot = f(y, z, p, t), 0 = k(y, p, t), requires
                       k_y f_z nonsingular.
    INDEX1_MEMORY      ydot = f(y, z, y*, z*, p, t), 0 = k(y, z, y*, z*, p, t)
                       with k_z nonsingular; dynamics depend on the states at
                       the last transition.
    """

    FULLY_IMPLICIT_01 = "fully-implicit-01"
    HESSENBERG2 = "hessenberg-2"
    INDEX1_MEMORY = "index1-memory"


@dataclass(frozen=True)
class Point:
    """Full evaluation point of a mode residual."""

    ydot: np.ndarray
    y: np.ndarray
    z: np.ndarray
    ystar: np.ndarray
    zstar: np.ndarray
    p: np.ndarray
    t: float


@dataclass(frozen=True)
class JacobianCallbacks:
    """Optional analytic partials of a mode residual.

    Every callback shares the residual signature
    ``(ydot, y, z, ystar, zstar, p, t)`` and returns the corresponding
    partial-derivative matrix.  Missing entries fall back to central finite
    differences with step ``sqrt(eps) * max(1, |component|)``.
    """

    F_ydot: Optional[Callable] = None
    F_y: Optional[Callable] = None
    F_z: Optional[Callable] = None
    F_p: Optional[Callable] = None
    F_t: Optional[Callable] = None
    F_ystar: Optional[Callable] = None
    F_zstar: Optional[Callable] = None


@dataclass(frozen=True)
class JacobianSet:
    """All first-order partials of a mode residual at one point."""

    F_ydot: np.ndarray   # (n, n_y)
    F_y: np.ndarray      # (n, n_y)
    F_z: np.ndarray      # (n, n_z)
    F_p: np.ndarray      # (n, n_p)
    F_t: np.ndarray      # (n,)
    F_ystar: np.ndarray  # (n, n_y)
    F_zstar: np.ndarray  # (n, n_z)


@dataclass(frozen=True)
class ModeDynamics:
    """Residual evaluator of one mode plus optional analytic partials.

    The residual always returns ``n_y + n_z`` rows.  For HESSENBERG2 the rows
    must be ordered ``[ydot - f; k]`` with the last ``n_z`` rows independent
    of ``ydot`` and ``z``.  For INDEX1_MEMORY the ordering is ``[ydot - f; k]``
    with ``k_z`` nonsingular.  Memory arguments are ignored by the other
    classes.
    """

    residual: Callable
    jac: JacobianCallbacks = field(default_factory=JacobianCallbacks)


@dataclass(frozen=True)
class TransitionGuard:
    """Scalar guard; a transition fires at a sign change of ``h``."""

    h: Callable                      # (ydot, y, z, p, t) -> float
    h_ydot: Optional[Callable] = None
    h_y: Optional[Callable] = None
    h_z: Optional[Callable] = None
    h_p: Optional[Callable] = None
    h_t: Optional[Callable] = None


@dataclass(frozen=True)
class TransitionMap:
    """Equations mapping the pre-transition state to the next mode's state.

    ``T(ydot_plus, y_plus, z_plus, ydot_minus, y_minus, z_minus, p, t)``
    returns ``dim`` rows.  Together with the next mode's residual the rows
    must form a square, nonsingular system for the post-transition state
    (``dim = n_y`` for the fully implicit class, ``n_y - n_z`` for
    Hessenberg index-2, and ``n_y`` or ``n_y + n_z`` for the memory class).
    """

    T: Callable
    dim: int
    target: int
    T_ydot_plus: Optional[Callable] = None
    T_y_plus: Optional[Callable] = None
    T_z_plus: Optional[Callable] = None
    T_ydot_minus: Optional[Callable] = None
    T_y_minus: Optional[Callable] = None
    T_z_minus: Optional[Callable] = None
    T_p: Optional[Callable] = None
    T_t: Optional[Callable] = None


@dataclass(frozen=True)
class QuadratureSpec:
    """Scalar integrand of the output functional G(p) = int g dt."""

    g: Callable                    # (y, z, p, t) -> float
    g_y: Optional[Callable] = None
    g_z: Optional[Callable] = None
    g_p: Optional[Callable] = None


@dataclass(frozen=True)
class ExplicitIC:
    """Explicit initial values; missing ``z0``/``ydot0`` are solved from the
    residual.  ``y0`` must not depend on the parameters."""

    y0: np.ndarray
    z0: Optional[np.ndarray] = None
    ydot0: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ImplicitIC:
    """Initial conditions given implicitly as T0(ydot, y, p, t0) = 0.

    For HESSENBERG2 the callable receives the same arguments but must depend
    on ``y`` only and return ``n_y - n_z`` rows.
    """

    T0: Callable
    dim: int
    T0_ydot: Optional[Callable] = None
    T0_y: Optional[Callable] = None
    T0_p: Optional[Callable] = None


@dataclass(frozen=True)
class Mode:
    """One continuous regime: dynamics, exit guard and transition map.

    ``guard``/``transition`` may be None for a terminal mode that runs to the
    end of the horizon.  ``quadrature`` optionally overrides the spec-level
    integrand for this mode.
    """

    dynamics: ModeDynamics
    guard: Optional[TransitionGuard] = None
    transition: Optional[TransitionMap] = None
    quadrature: Optional[QuadratureSpec] = None


@dataclass(frozen=True)
class HybridSystemSpec:
    """Immutable description of a hybrid system.

    The linear transition counter plays the role of the mode-sequence index:
    the same :class:`Mode` object may recur any number of times.
    ``initial_mode`` is either a mode index or a rule
    ``(ydot, y, z, p, t) -> int`` evaluated at the initial state.
    """

    modes: tuple
    initial_mode: Union[int, Callable]
    initial: Union[ExplicitIC, ImplicitIC]
    quadrature: QuadratureSpec
    p_nominal: np.ndarray
    t0: float
    tf: float
    dae_class: DaeClass
    n_y: int
    n_z: int
    name: str = ""

    def __post_init__(self):
        if not self.t0 < self.tf:
            raise ValueError("t0 must be less than tf")
        object.__setattr__(self, "p_nominal",
                           np.asarray(self.p_nominal, dtype=float))
        object.__setattr__(self, "modes", tuple(self.modes))

    @property
    def n_p(self) -> int:
        return self.p_nominal.size

    @property
    def n_x(self) -> int:
        return self.n_y + self.n_z

    def mode_quadrature(self, mode: int) -> QuadratureSpec:
        q = self.modes[mode].quadrature
        return q if q is not None else self.quadrature

    def with_params(self, p) -> "HybridSystemSpec":
        return replace(self, p_nominal=np.asarray(p, dtype=float))


# ---------------------------------------------------------------------------
# Evaluation helpers


def _call(fn, *args):
    try:
        out = fn(*args)
    except Exception as exc:  # noqa: BLE001 - user code boundary
        raise EvaluationFailure(f"user evaluator {fn!r} raised: {exc}") from exc
    return out


def _fd_steps(x: np.ndarray) -> np.ndarray:
    return _SQRT_EPS * np.maximum(1.0, np.abs(x))


def _fd_matrix(res, base_args, slot, x, n_rows):
    """Central finite-difference Jacobian of ``res`` w.r.t. argument ``slot``."""
    x = np.asarray(x, dtype=float)
    out = np.empty((n_rows, x.size))
    steps = _fd_steps(x)
    for j in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[j] += steps[j]
        xm[j] -= steps[j]
        args_p = list(base_args)
        args_m = list(base_args)
        args_p[slot] = xp
        args_m[slot] = xm
        rp = np.asarray(_call(res, *args_p), dtype=float)
        rm = np.asarray(_call(res, *args_m), dtype=float)
        out[:, j] = (rp - rm) / (2.0 * steps[j])
    return out


def _fd_time(res, base_args, n_rows):
    t = float(base_args[6])
    dt = _SQRT_EPS * max(1.0, abs(t))
    args_p = list(base_args)
    args_m = list(base_args)
    args_p[6] = t + dt
    args_m[6] = t - dt
    rp = np.asarray(_call(res, *args_p), dtype=float)
    rm = np.asarray(_call(res, *args_m), dtype=float)
    return (rp - rm) / (2.0 * dt)


def _one_partial(dyn, cb, args, slot, n_rows):
    n_cols = np.asarray(args[slot]).size
    if cb is not None:
        m = np.asarray(_call(cb, *args), dtype=float)
        return m.reshape(n_rows, n_cols)
    return _fd_matrix(dyn.residual, args, slot, args[slot], n_rows)


def eval_state_partials(dyn: ModeDynamics, ydot, y, z, ystar, zstar, p, t):
    """(F_ydot, F_y, F_z) at the point; analytic where supplied, FD otherwise."""
    args = (ydot, y, z, ystar, zstar, p, t)
    n_rows = ydot.size + z.size
    return (_one_partial(dyn, dyn.jac.F_ydot, args, 0, n_rows),
            _one_partial(dyn, dyn.jac.F_y, args, 1, n_rows),
            _one_partial(dyn, dyn.jac.F_z, args, 2, n_rows))


def eval_forcing_partials(dyn: ModeDynamics, ydot, y, z, ystar, zstar, p, t):
    """(F_p, F_ystar, F_zstar) at the point."""
    args = (ydot, y, z, ystar, zstar, p, t)
    n_rows = ydot.size + z.size
    return (_one_partial(dyn, dyn.jac.F_p, args, 5, n_rows),
            _one_partial(dyn, dyn.jac.F_ystar, args, 3, n_rows),
            _one_partial(dyn, dyn.jac.F_zstar, args, 4, n_rows))


def eval_time_partial(dyn: ModeDynamics, ydot, y, z, ystar, zstar, p, t):
    args = (ydot, y, z, ystar, zstar, p, t)
    n_rows = ydot.size + z.size
    if dyn.jac.F_t is not None:
        return np.asarray(_call(dyn.jac.F_t, *args), dtype=float).reshape(n_rows)
    return _fd_time(dyn.residual, args, n_rows)


def eval_jacobians(dyn: ModeDynamics, point: Point) -> JacobianSet:
    """Evaluate all residual partials at ``point``.

    Analytic callbacks are used where supplied; the rest fall back to central
    finite differences.  Deterministic for fixed inputs.
    """
    a = (point.ydot, point.y, point.z, point.ystar, point.zstar,
         point.p, point.t)
    fyd, fy, fz = eval_state_partials(dyn, *a)
    fp, fys, fzs = eval_forcing_partials(dyn, *a)
    ft = eval_time_partial(dyn, *a)
    return JacobianSet(F_ydot=fyd, F_y=fy, F_z=fz, F_p=fp, F_t=ft,
                       F_ystar=fys, F_zstar=fzs)


def guard_partials(guard: TransitionGuard, point: Point):
    """Return (h_ydot, h_y, h_z, h_p, h_t) at ``point``, FD where missing."""
    args = (point.ydot, point.y, point.z, point.p, point.t)

    def row(cb, slot, x):
        if cb is not None:
            return np.asarray(_call(cb, *args), dtype=float).reshape(-1)
        x = np.asarray(x, dtype=float)
        out = np.empty(x.size)
        steps = _fd_steps(x)
        for j in range(x.size):
            ap = list(args)
            am = list(args)
            xp = x.copy()
            xm = x.copy()
            xp[j] += steps[j]
            xm[j] -= steps[j]
            ap[slot] = xp
            am[slot] = xm
            out[j] = (_call(guard.h, *ap) - _call(guard.h, *am)) / (2 * steps[j])
        return out

    h_ydot = row(guard.h_ydot, 0, point.ydot)
    h_y = row(guard.h_y, 1, point.y)
    h_z = row(guard.h_z, 2, point.z)
    h_p = row(guard.h_p, 3, point.p)
    if guard.h_t is not None:
        h_t = float(_call(guard.h_t, *args))
    else:
        dt = _SQRT_EPS * max(1.0, abs(point.t))
        ap = list(args)
        am = list(args)
        ap[4] = point.t + dt
        am[4] = point.t - dt
        h_t = (_call(guard.h, *ap) - _call(guard.h, *am)) / (2 * dt)
    return h_ydot, h_y, h_z, h_p, h_t


def quad_partials(q: QuadratureSpec, y, z, p, t):
    """Return (g_y, g_z, g_p) at the point, FD where missing."""
    args = (y, z, p, t)

    def row(cb, slot, x):
        if cb is not None:
            return np.asarray(_call(cb, *args), dtype=float).reshape(-1)
        x = np.asarray(x, dtype=float)
        out = np.empty(x.size)
        steps = _fd_steps(x)
        for j in range(x.size):
            ap = list(args)
            am = list(args)
            xp = x.copy()
            xm = x.copy()
            xp[j] += steps[j]
            xm[j] -= steps[j]
            ap[slot] = xp
            am[slot] = xm
            out[j] = (_call(q.g, *ap) - _call(q.g, *am)) / (2 * steps[j])
        return out

    return row(q.g_y, 0, y), row(q.g_z, 1, z), row(q.g_p, 2, p)


def map_partials(tmap: TransitionMap, after, before, p, t):
    """All partials of the transition map at (after | before).

    Returns a dict with keys matching the callback names; finite differences
    are used for missing callbacks.
    """
    args = (after[0], after[1], after[2], before[0], before[1], before[2], p, t)
    names = ["T_ydot_plus", "T_y_plus", "T_z_plus",
             "T_ydot_minus", "T_y_minus", "T_z_minus", "T_p"]
    out = {}
    for slot, name in enumerate(names):
        cb = getattr(tmap, name)
        if cb is not None:
            out[name] = np.atleast_2d(np.asarray(_call(cb, *args), dtype=float))
        else:
            out[name] = _fd_matrix(tmap.T, args, slot, args[slot], tmap.dim)
    if tmap.T_t is not None:
        out["T_t"] = np.asarray(_call(tmap.T_t, *args), dtype=float).reshape(tmap.dim)
    else:
        tt = float(t)
        dt = _SQRT_EPS * max(1.0, abs(tt))
        ap = list(args)
        am = list(args)
        ap[7] = tt + dt
        am[7] = tt - dt
        rp = np.asarray(_call(tmap.T, *ap), dtype=float)
        rm = np.asarray(_call(tmap.T, *am), dtype=float)
        out["T_t"] = (rp - rm) / (2 * dt)
    return out


# ---------------------------------------------------------------------------
# Hidden derivatives


def compute_hidden_derivatives(dyn: ModeDynamics, point: Point,
                               dae_class: DaeClass = DaeClass.FULLY_IMPLICIT_01):
    """Solve the time-differentiated DAE for (yddot, zdot) at ``point``.

    For the fully implicit and memory classes this solves

        [F_ydot | F_z] [yddot; zdot] = -(F_y ydot + F_t)

    which is well posed whenever the solvability matrix is nonsingular.  For
    HESSENBERG2 the missing curvature of the constraint rows is recovered by
    a directional finite difference along the trajectory.
    """
    jac = eval_jacobians(dyn, point)
    n_y = point.y.size
    n_z = point.z.size
    if dae_class is DaeClass.HESSENBERG2:
        return _hidden_hi2(dyn, point, jac, n_y, n_z)
    m = np.hstack([jac.F_ydot, jac.F_z])
    rhs = -(jac.F_y @ point.ydot + jac.F_t)
    try:
        sol = np.linalg.solve(m, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix("[F_ydot | F_z] is singular at the point") from exc
    return sol[:n_y], sol[n_y:]


def _hidden_hi2(dyn, point, jac, n_y, n_z):
    # rows: [ydot - f; k];  A = f_y, B = f_z, C = k_y
    a = -jac.F_y[:n_y, :]
    b = -jac.F_z[:n_y, :]
    c = jac.F_y[n_y:, :]
    f_t = -jac.F_t[:n_y]
    cb = c @ b
    # second time derivative of k along the trajectory via a directional
    # difference of phi(e) = k_y(y + e*ydot, t + e) ydot + k_t(y + e*ydot, t + e)
    def phi(eps):
        pt = Point(point.ydot, point.y + eps * point.ydot, point.z,
                   point.ystar, point.zstar, point.p, point.t + eps)
        j = eval_jacobians(dyn, pt)
        return j.F_y[n_y:, :] @ point.ydot + j.F_t[n_y:]

    eps = _SQRT_EPS * max(1.0, float(np.linalg.norm(point.y)))
    dphi = (phi(eps) - phi(-eps)) / (2 * eps)
    rhs = -c @ (a @ point.ydot + f_t) - dphi
    try:
        zdot = np.linalg.solve(cb, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix("C B is singular at the point") from exc
    yddot = a @ point.ydot + b @ zdot + f_t
    return yddot, zdot


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class Finding:
    kind: str
    mode: int
    probe: int
    value: float
    ok: bool
    message: str


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple

    @property
    def ok(self) -> bool:
        return all(f.ok for f in self.findings)

    def by_kind(self, kind: str):
        return [f for f in self.findings if f.kind == kind]


_SV_TOL = 1e-10
_DRIFT_TOL = 1e-8


def _svmin(m: np.ndarray) -> float:
    if m.size == 0:
        return np.inf
    return float(np.linalg.svd(m, compute_uv=False)[-1])


def validate_spec(spec: HybridSystemSpec, probe_points: Sequence[Point]) -> ValidationReport:
    """Numerically check the solvability conditions at the given probe points.

    Pure: the spec is never mutated and repeated calls produce identical
    reports.  Singular findings are reported with ``ok=False`` rather than
    raised; only failing user evaluators raise :class:`EvaluationFailure`.
    """
    findings = []
    for k, pt in enumerate(probe_points):
        for m_idx, mode in enumerate(spec.modes):
            jac = eval_jacobians(mode.dynamics, pt)
            n_y, n_z = spec.n_y, spec.n_z
            if spec.dae_class is DaeClass.FULLY_IMPLICIT_01:
                sv = _svmin(np.hstack([jac.F_ydot, jac.F_z]))
                findings.append(Finding(
                    "solvability", m_idx, k, sv, sv > _SV_TOL,
                    f"smallest singular value of [F_ydot | F_z] = {sv:.3e}"))
            elif spec.dae_class is DaeClass.HESSENBERG2:
                b = -jac.F_z[:n_y, :]
                c = jac.F_y[n_y:, :]
                sv = _svmin(c @ b)
                findings.append(Finding(
                    "solvability", m_idx, k, sv, sv > _SV_TOL,
                    f"smallest singular value of C B = {sv:.3e}"))
            else:
                kz = jac.F_z[n_y:, :]
                sv = _svmin(kz)
                findings.append(Finding(
                    "solvability", m_idx, k, sv, sv > _SV_TOL,
                    f"smallest singular value of k_z = {sv:.3e}"))
            if mode.guard is not None:
                try:
                    yddot, zdot = compute_hidden_derivatives(
                        mode.dynamics, pt, spec.dae_class)
                    h_ydot, h_y, h_z, h_p, h_t = guard_partials(mode.guard, pt)
                    drift = float(h_ydot @ yddot + h_y @ pt.ydot
                                  + h_z @ zdot + h_t)
                    findings.append(Finding(
                        "guard-drift", m_idx, k, drift,
                        abs(drift) > _DRIFT_TOL,
                        f"guard drift = {drift:.3e}"))
                except SingularMatrix:
                    findings.append(Finding(
                        "guard-drift", m_idx, k, 0.0, False,
                        "hidden derivatives unavailable (singular matrix)"))
            if mode.transition is not None:
                tm = mode.transition
                tp = map_partials(tm, (pt.ydot, pt.y, pt.z),
                                  (pt.ydot, pt.y, pt.z), pt.p, pt.t)
                tgt = spec.modes[tm.target]
                jact = eval_jacobians(tgt.dynamics, pt)
                if spec.dae_class is DaeClass.HESSENBERG2:
                    c = jact.F_y[n_y:, :]
                    m = np.vstack([tp["T_y_plus"], c])
                    label = "[T_y+; C]"
                else:
                    m = np.vstack([
                        np.hstack([tp["T_ydot_plus"], tp["T_y_plus"], tp["T_z_plus"]]),
                        np.hstack([jact.F_ydot, jact.F_y, jact.F_z]),
                    ])
                    label = "[T+; F]"
                sv = _svmin(m)
                # full column rank is what matters when the stack is tall
                findings.append(Finding(
                    "transition-matrix", m_idx, k, sv, sv > _SV_TOL,
                    f"smallest singular value of {label} = {sv:.3e}"))
    return ValidationReport(findings=tuple(findings))
