"""AC power flow: injection evaluation, Newton-Raphson solve, Q-V sensitivity.

Conventions.  Injections follow the standard polar equations

    P_i = sum_k |V_i||V_k| (G_ik cos(t_i - t_k) + B_ik sin(t_i - t_k))
    Q_i = sum_k |V_i||V_k| (G_ik sin(t_i - t_k) - B_ik cos(t_i - t_k))

Note the reactive equation uses the textbook ``G sin - B cos`` form; some
sources print a ``G cos - B sin`` variant for Q, which is not consistent with
S = V conj(YV) and is not used here.

For a shunt-free network the total active injection collapses to a per-branch
quadratic form; :func:`quadratic_form_total` (rectangular coordinates) and
:func:`polar_form_total` (magnitude/angle coordinates) implement it as pure
functions so the identity is testable rather than assumed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netmodel import BusKind, Network

__all__ = [
    "VoltageState",
    "InjectionProfile",
    "BusSetpoint",
    "PowerFlowError",
    "evaluate_injections",
    "quadratic_form_total",
    "polar_form_total",
    "base_setpoints",
    "solve_newton",
    "qv_sensitivity",
]


class PowerFlowError(RuntimeError):
    """Newton solve failed (non-convergence or singular Jacobian)."""

    def __init__(self, message: str, mismatch: float | None = None):
        super().__init__(message)
        self.mismatch = mismatch


@dataclass(frozen=True, eq=False)
class VoltageState:
    """Per-bus complex voltage in polar form, with rectangular views."""

    magnitudes: np.ndarray
    angles: np.ndarray

    def __post_init__(self) -> None:
        m = np.array(self.magnitudes, dtype=float)
        a = np.array(self.angles, dtype=float)
        if m.shape != a.shape or m.ndim != 1:
            raise ValueError("magnitudes and angles must be 1-D arrays of equal length")
        if not np.all(m > 0):
            raise ValueError("voltage magnitudes must be positive")
        m.flags.writeable = False
        a.flags.writeable = False
        object.__setattr__(self, "magnitudes", m)
        object.__setattr__(self, "angles", a)

    @property
    def n(self) -> int:
        return self.magnitudes.shape[0]

    @property
    def phasors(self) -> np.ndarray:
        return self.magnitudes * np.exp(1j * self.angles)

    @property
    def v_re(self) -> np.ndarray:
        return self.magnitudes * np.cos(self.angles)

    @property
    def v_im(self) -> np.ndarray:
        return self.magnitudes * np.sin(self.angles)


@dataclass(frozen=True, eq=False)
class InjectionProfile:
    """Net per-bus active/reactive power injections (generation positive)."""

    p: np.ndarray
    q: np.ndarray


@dataclass(frozen=True)
class BusSetpoint:
    """What is held fixed at a bus during a Newton solve.

    kind SLACK -> vm and va fixed; kind GEN (PV-type) -> p and vm fixed;
    kind LOAD (PQ-type) -> p and q fixed.
    """

    kind: BusKind
    p: float = 0.0
    q: float = 0.0
    vm: float = 1.0
    va: float = 0.0


def evaluate_injections(network: Network, state: VoltageState) -> InjectionProfile:
    """Evaluate net injections implied by a voltage state: S = V conj(Y V)."""
    if state.n != network.n:
        raise ValueError(f"state has {state.n} buses, network has {network.n}")
    v = state.phasors
    s = v * np.conj(network.ybus @ v)
    return InjectionProfile(p=s.real, q=s.imag)


def quadratic_form_total(network: Network, state: VoltageState) -> float:
    """Total active injection as the rectangular per-branch quadratic form.

    sum over branches of (-G_ik) * [(V_i,re - V_k,re)^2 + (V_i,im - V_k,im)^2];
    equals sum_i P_i on shunt-free networks.
    """
    vre, vim = state.v_re, state.v_im
    total = 0.0
    for br in network.branches:
        g = br.series_admittance.real  # == -G_ik of the ybus off-diagonal
        i, k = br.from_bus, br.to_bus
        total += g * ((vre[i] - vre[k]) ** 2 + (vim[i] - vim[k]) ** 2)
    return total


def polar_form_total(network: Network, state: VoltageState) -> float:
    """Same total as :func:`quadratic_form_total` in polar coordinates.

    sum over branches of (-G_ik) * [a^2 + b^2 - 2 a b cos(t_i - t_k)].
    """
    m, t = state.magnitudes, state.angles
    total = 0.0
    for br in network.branches:
        g = br.series_admittance.real
        i, k = br.from_bus, br.to_bus
        a, b = m[i], m[k]
        total += g * (a * a + b * b - 2 * a * b * np.cos(t[i] - t[k]))
    return total


def base_setpoints(network: Network) -> tuple[BusSetpoint, ...]:
    """Setpoints for the base operating case: loads as PQ, slack fixed."""
    out = []
    for b in network.buses:
        if b.kind is BusKind.SLACK:
            out.append(BusSetpoint(kind=BusKind.SLACK, vm=network.slack_vm, va=0.0))
        else:
            out.append(BusSetpoint(kind=BusKind.LOAD, p=-b.load_p, q=-b.load_q))
    return tuple(out)


def _injections_polar(ybus: np.ndarray, vm: np.ndarray, va: np.ndarray):
    v = vm * np.exp(1j * va)
    s = v * np.conj(ybus @ v)
    return s.real, s.imag


def _jacobian(ybus: np.ndarray, vm: np.ndarray, va: np.ndarray):
    """Standard polar power-flow Jacobian blocks (full n x n).

    H = dP/dtheta, N = dP/dV, M = dQ/dtheta, L = dQ/dV, evaluated at
    (vm, va).  Also returns the injections P, Q at that point.
    """
    g, b = ybus.real, ybus.imag
    dth = va[:, None] - va[None, :]
    cos_t, sin_t = np.cos(dth), np.sin(dth)
    vv = vm[:, None] * vm[None, :]
    p_terms = vv * (g * cos_t + b * sin_t)
    q_terms = vv * (g * sin_t - b * cos_t)
    p = p_terms.sum(axis=1)
    q = q_terms.sum(axis=1)

    h = q_terms.copy()
    np.fill_diagonal(h, -q - b.diagonal() * vm**2)

    nmat = p_terms / vm[None, :]
    np.fill_diagonal(nmat, p / vm + g.diagonal() * vm)

    m = -p_terms.copy()
    np.fill_diagonal(m, p - g.diagonal() * vm**2)

    l = q_terms / vm[None, :]
    np.fill_diagonal(l, q / vm - b.diagonal() * vm)

    return h, nmat, m, l, p, q


def solve_newton(
    network: Network,
    setpoints: tuple[BusSetpoint, ...] | list[BusSetpoint],
    tol: float = 1e-8,
    max_iter: int = 50,
    x0: VoltageState | None = None,
    damping: float = 1.0,
    step_tol: float = 0.0,
) -> VoltageState:
    """Newton-Raphson power flow for the given per-bus setpoints.

    Unknowns are angles at non-fixed buses plus magnitudes at PQ buses.
    Converges when the active/reactive mismatch infinity-norm drops to
    ``tol``; with ``step_tol`` > 0 the damped iteration also stops once the
    voltage update is smaller than ``step_tol``.  Starts flat (1 p.u., zero
    angle) unless ``x0`` is given.
    """
    n = network.n
    if len(setpoints) != n:
        raise ValueError("one setpoint per bus required")
    if x0 is None:
        vm = np.ones(n)
        va = np.zeros(n)
    else:
        vm = np.array(x0.magnitudes, dtype=float)
        va = np.array(x0.angles, dtype=float)
    fixed = [i for i, sp in enumerate(setpoints) if sp.kind is BusKind.SLACK]
    pv = [i for i, sp in enumerate(setpoints) if sp.kind is BusKind.GEN]
    pq = [i for i, sp in enumerate(setpoints) if sp.kind is BusKind.LOAD]
    for i in fixed:
        vm[i] = setpoints[i].vm
        va[i] = setpoints[i].va
    for i in pv:
        vm[i] = setpoints[i].vm
    ang_idx = sorted(pv + pq)  # buses with free angle
    mag_idx = sorted(pq)       # buses with free magnitude
    p_sched = np.array([sp.p for sp in setpoints])
    q_sched = np.array([sp.q for sp in setpoints])

    mismatch = np.inf
    for it in range(max_iter + 1):
        p, q = _injections_polar(network.ybus, vm, va)
        dp = p_sched[ang_idx] - p[ang_idx]
        dq = q_sched[mag_idx] - q[mag_idx]
        rhs = np.concatenate([dp, dq])
        mismatch = float(np.max(np.abs(rhs))) if rhs.size else 0.0
        if mismatch <= tol:
            return VoltageState(magnitudes=vm, angles=va)
        if it == max_iter:
            break
        h, nm, m, l, _, _ = _jacobian(network.ybus, vm, va)
        jac = np.block(
            [
                [h[np.ix_(ang_idx, ang_idx)], nm[np.ix_(ang_idx, mag_idx)]],
                [m[np.ix_(mag_idx, ang_idx)], l[np.ix_(mag_idx, mag_idx)]],
            ]
        )
        try:
            step = np.linalg.solve(jac, rhs)
        except np.linalg.LinAlgError:
            raise PowerFlowError("singular Jacobian", mismatch=mismatch) from None
        step = damping * step
        na = len(ang_idx)
        va[ang_idx] += step[:na]
        vm[mag_idx] += step[na:]
        if np.any(vm <= 0):
            raise PowerFlowError("voltage magnitude collapsed below zero", mismatch=mismatch)
        if step_tol > 0 and (step.size == 0 or float(np.max(np.abs(step))) < step_tol):
            return VoltageState(magnitudes=vm, angles=va)
    raise PowerFlowError(
        f"no convergence in {max_iter} iterations (final mismatch {mismatch:.3e})",
        mismatch=mismatch,
    )


def qv_sensitivity(
    network: Network,
    state: VoltageState,
    fixed: tuple[int, ...] | None = None,
) -> np.ndarray:
    """Reduced-Jacobian sensitivity d|V|/dQ over the free (non-fixed) buses.

    Eliminates the angle equations at constant P:  dQ = (L - M H^-1 N) dV,
    so the returned matrix is the inverse of that reduced block.  ``fixed``
    defaults to the slack bus; rows/columns follow ascending bus id over the
    free buses.
    """
    if fixed is None:
        fixed = (network.slack_index,)
    free = [i for i in range(network.n) if i not in set(fixed)]
    if not free:
        raise ValueError("no free buses for sensitivity")
    h, nm, m, l, _, _ = _jacobian(network.ybus, state.magnitudes, state.angles)
    hf = h[np.ix_(free, free)]
    nf = nm[np.ix_(free, free)]
    mf = m[np.ix_(free, free)]
    lf = l[np.ix_(free, free)]
    try:
        reduced = lf - mf @ np.linalg.solve(hf, nf)
        return np.linalg.inv(reduced)
    except np.linalg.LinAlgError:
        raise PowerFlowError("singular Jacobian in Q-V sensitivity") from None
