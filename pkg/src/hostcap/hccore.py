"""Constructive hosting-capacity solver.

The weighted hosting capacity of a radial feeder,

    HC = sum_i lambda_i * P_i_inj(V),

is maximised constructively rather than by a general NLP solver.  The stages:

1. ``solve_voltage_only`` — with only the magnitude box active, the optimum
   is the alternating pattern: odd-depth buses at v_max, even-depth buses at
   v_min (slack magnitude stays at its own fixed setpoint).
2. ``solve_with_angle`` — with a bound theta_max on branch angle
   differences, every branch difference is set to +-min(pi, theta_max); the
   magnitude pattern switches from high-low to all-high once theta_max
   exceeds the critical angle arccos((v_max + v_min) / (2 v_max)).
3. ``adjust_thermal`` — branches whose current exceeds their limit C get
   their endpoint magnitudes moved onto the curve
   a^2 + b^2 - 2 a b cos(theta) = C^2 / (G^2 + B^2), which caps the branch's
   contribution at its maximum feasible value.
4. ``adjust_power_factor`` — generator buses whose reactive injection
   violates |Q| <= sqrt(1 - eta^2)/eta * |P| are switched to fixed-(P, Q)
   at the bound and the voltages re-solved by a damped sensitivity
   iteration.

``solve_hc`` runs the full pipeline and re-verifies thermal and power-factor
feasibility jointly.  The construction assumes off-diagonal conductances are
non-positive (true for any branch with r >= 0); networks violating that are
refused rather than silently mis-solved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .netmodel import Branch, BusKind, Network, bfs_tree
from .powerflow import (
    BusSetpoint,
    InjectionProfile,
    PowerFlowError,
    VoltageState,
    evaluate_injections,
    solve_newton,
)

__all__ = [
    "ConstraintSet",
    "HCSolution",
    "InfeasibleError",
    "AdjustmentError",
    "BoundaryConflict",
    "weighted_hc",
    "critical_angle",
    "solve_voltage_only",
    "solve_with_angle",
    "branch_current",
    "adjust_thermal",
    "pf_q_bounds",
    "adjust_power_factor",
    "solve_hc",
    "solve_hc_stages",
    "finalize_solution",
    "power_factors",
    "thermal_utilization",
]

THERMAL_RTOL = 1e-9   # accepted overshoot on |I|/C
PF_ATOL = 1e-6        # accepted undershoot on pf vs eta
BOX_ATOL = 1e-9       # accepted overshoot on the magnitude box
BINDING_TOL = 1e-6    # constraint slack below which it is reported binding


class InfeasibleError(RuntimeError):
    """The constraint set cannot be satisfied (reports the offending element)."""


class AdjustmentError(RuntimeError):
    """A correction stage failed to converge."""


class BoundaryConflict(AdjustmentError):
    """A correction would need to move a bus that is held fixed."""


@dataclass(frozen=True)
class ConstraintSet:
    """Operating limits: magnitude box, angle-difference bound, pf floor.

    Thermal limits are carried per-branch on the network itself.  ``eta``
    of ``None`` disables the power-factor constraint entirely.
    """

    v_min: float = 0.95
    v_max: float = 1.05
    theta_max: float = 0.0
    eta: float | None = None

    def __post_init__(self) -> None:
        if not 0 < self.v_min <= self.v_max:
            raise ValueError("require 0 < v_min <= v_max")
        if self.theta_max < 0:
            raise ValueError("theta_max must be non-negative")
        if self.eta is not None and not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class HCSolution:
    """A feasible operating point with its weighted hosting capacity."""

    state: VoltageState
    injections: InjectionProfile
    hc_total: float
    binding: tuple[tuple[str, int], ...]
    stage: str


def weighted_hc(network: Network, state: VoltageState) -> float:
    """Objective value sum_i lambda_i * P_i at the given state."""
    inj = evaluate_injections(network, state)
    return float(network.lam @ inj.p)


def critical_angle(v_max: float, v_min: float) -> float:
    """Angle bound at which the optimal magnitude pattern switches.

    arccos((v_max + v_min) / (2 v_max)); zero when the box is degenerate.
    """
    if not 0 < v_min <= v_max:
        raise ValueError("require 0 < v_min <= v_max")
    return math.acos((v_max + v_min) / (2.0 * v_max))


def pf_q_bounds(p: float, eta: float) -> tuple[float, float]:
    """Reactive band (q_min, q_max) allowed by a power-factor floor eta.

    |Q| <= sqrt(1 - eta^2)/eta * |P|  (equivalently |P|/|S| >= eta).
    """
    if not 0 < eta <= 1:
        raise ValueError("eta must lie in (0, 1]")
    half_width = math.sqrt(1.0 - eta * eta) / eta * abs(p)
    return (-half_width, half_width)


def power_factors(network: Network, inj: InjectionProfile) -> np.ndarray:
    """|P|/|S| per bus; buses with zero apparent power count as unity."""
    s = np.hypot(inj.p, inj.q)
    with np.errstate(invalid="ignore", divide="ignore"):
        pf = np.where(s > 0, np.abs(inj.p) / np.where(s > 0, s, 1.0), 1.0)
    return pf


def branch_current(network: Network, state: VoltageState, branch: Branch) -> complex:
    """Series current phasor of one branch, from its endpoint voltages."""
    v = state.phasors
    return branch.series_admittance * (v[branch.from_bus] - v[branch.to_bus])


def thermal_utilization(network: Network, state: VoltageState) -> float:
    """max over limited branches of |I|/C; 0.0 when nothing is limited."""
    worst = 0.0
    for br in network.branches:
        if br.thermal_limit is not None:
            if br.thermal_limit == 0:
                cur = abs(branch_current(network, state, br))
                worst = max(worst, math.inf if cur > 0 else 0.0)
            else:
                worst = max(worst, abs(branch_current(network, state, br)) / br.thermal_limit)
    return worst


def _check_conductance_signs(network: Network) -> None:
    # the pattern argument needs -G_ik >= 0 on every branch
    for br in network.branches:
        if br.series_admittance.real < -1e-12:
            raise ValueError(
                f"branch {br.from_bus}-{br.to_bus} has negative series conductance; "
                "the pattern construction does not apply"
            )


def _gen_indices(network: Network) -> list[int]:
    return [b.id for b in network.buses if b.kind is BusKind.GEN]


def _binding(network: Network, c: ConstraintSet, state: VoltageState,
             inj: InjectionProfile) -> tuple[tuple[str, int], ...]:
    out: list[tuple[str, int]] = []
    slack = network.slack_index
    for i in range(network.n):
        if i == slack:
            continue
        if c.v_max - state.magnitudes[i] < BINDING_TOL:
            out.append(("v_max", i))
        if state.magnitudes[i] - c.v_min < BINDING_TOL:
            out.append(("v_min", i))
    for bi, br in enumerate(network.branches):
        dth = abs(state.angles[br.from_bus] - state.angles[br.to_bus])
        if c.theta_max - dth < BINDING_TOL:
            out.append(("theta", bi))
        if br.thermal_limit is not None:
            if br.thermal_limit - abs(branch_current(network, state, br)) < BINDING_TOL:
                out.append(("thermal", bi))
    if c.eta is not None:
        pf = power_factors(network, inj)
        for i in _gen_indices(network):
            if pf[i] - c.eta < BINDING_TOL:
                out.append(("pf", i))
    return tuple(out)


def finalize_solution(network: Network, c: ConstraintSet, state: VoltageState, stage: str) -> HCSolution:
    inj = evaluate_injections(network, state)
    return HCSolution(
        state=state,
        injections=inj,
        hc_total=float(network.lam @ inj.p),
        binding=_binding(network, c, state, inj),
        stage=stage,
    )


def _pattern_state(
    network: Network,
    c: ConstraintSet,
    depths: np.ndarray,
    all_high: bool,
    theta: float,
    root_vm: float | None = None,
) -> VoltageState:
    """Magnitude/angle pattern for given tree depths.

    Non-root magnitudes alternate v_max (odd depth) / v_min (even depth), or
    sit at v_max everywhere when ``all_high``.  Angles alternate 0 / theta by
    depth parity, shifted so the root (slack) sits at zero.  ``depths`` may
    be global depths of a subnetwork, so boundary buses keep their global
    parity.
    """
    root = network.slack_index
    par = depths % 2
    if all_high:
        mags = np.full(network.n, c.v_max, dtype=float)
    else:
        mags = np.where(par == 1, c.v_max, c.v_min).astype(float)
    mags[root] = root_vm if root_vm is not None else network.slack_vm
    angles = theta * par.astype(float)
    angles = angles - angles[root]
    return VoltageState(magnitudes=mags, angles=angles)


def _pattern_stage(
    network: Network,
    c: ConstraintSet,
    depths: np.ndarray | None = None,
    root_vm: float | None = None,
) -> HCSolution:
    _check_conductance_signs(network)
    if depths is None:
        _, depths, _ = bfs_tree(network)
    if c.theta_max == 0:
        state = _pattern_state(network, c, depths, all_high=False, theta=0.0, root_vm=root_vm)
        return finalize_solution(network, c, state, stage="voltage_pattern")
    theta = min(math.pi, c.theta_max)
    all_high = c.theta_max > critical_angle(c.v_max, c.v_min)
    state = _pattern_state(network, c, depths, all_high=all_high, theta=theta, root_vm=root_vm)
    return finalize_solution(network, c, state, stage="angle_pattern")


def solve_voltage_only(network: Network, c: ConstraintSet) -> HCSolution:
    """Stage-1 pattern: magnitude box only, real voltages (zero angles)."""
    return _pattern_stage(network, replace(c, theta_max=0.0))


def solve_with_angle(network: Network, c: ConstraintSet) -> HCSolution:
    """Stage-2 pattern: every branch angle difference at +-min(pi, theta_max).

    Above the critical angle all buses sit at v_max; below it the high-low
    magnitude pattern of stage 1 remains.  theta_max == 0 reduces exactly to
    :func:`solve_voltage_only`.
    """
    return _pattern_stage(network, c)


# --- thermal correction ------------------------------------------------------


def _curve_candidates(a: float, cos_t: float, kappa2: float, c: ConstraintSet) -> list[float]:
    """Values of b in the box with a^2 + b^2 - 2ab cos_t <= kappa2.

    Returns the exact curve roots that fall inside [v_min, v_max] (branch
    term at its cap), plus any box endpoint strictly inside the feasible
    interval as a fallback when neither root is admissible.
    """
    disc = kappa2 - a * a * (1.0 - cos_t * cos_t)
    cands: list[float] = []
    if disc >= 0:
        root = math.sqrt(disc)
        for b in (a * cos_t - root, a * cos_t + root):
            if c.v_min - 1e-12 <= b <= c.v_max + 1e-12:
                cands.append(min(max(b, c.v_min), c.v_max))
    if not cands:
        for b in (c.v_min, c.v_max):
            if a * a + b * b - 2 * a * b * cos_t <= kappa2 * (1 + 1e-12):
                cands.append(b)
    return cands


def _branch_term(a: float, b: float, cos_t: float) -> float:
    return a * a + b * b - 2 * a * b * cos_t


def adjust_thermal(
    network: Network,
    c: ConstraintSet,
    sol: HCSolution,
    immutable: frozenset[int] = frozenset(),
) -> HCSolution:
    """Clamp branches whose current exceeds their thermal limit.

    A violating branch has its endpoint magnitudes moved onto the constant-
    current curve a^2 + b^2 - 2ab cos(theta) = C^2/(G^2 + B^2) (angles keep
    the stage-2 pattern).  Branches are processed root-outward and the
    shallower endpoint is held at its current value while the deeper one is
    solved from the quadratic, so every change propagates strictly away
    from the root and a single sweep settles the tree.  (Holding the v_max
    side instead, regardless of depth, can sacrifice an upstream branch
    term that the depth rule preserves; a leaf clamp in particular should
    always move the leaf.)  Among in-box candidates the largest branch
    term wins, then the largest total objective.  When no candidate exists
    for the held value, a scan over the held side finds a feasible pair.
    Changes stay local to the branch endpoints; all limited branches are
    re-checked until clean.  Buses listed in ``immutable`` must not move;
    a violation that would have to move one raises
    :class:`BoundaryConflict` so a partitioned caller can fall back to the
    monolithic solve.
    """
    limited = [(bi, br) for bi, br in enumerate(network.branches) if br.thermal_limit is not None]
    if not limited:
        return sol
    slack = network.slack_index
    fixed_buses = set(immutable) | {slack}
    _, depths, _ = bfs_tree(network)
    # root-outward processing: the deeper endpoint is the one that moves
    limited.sort(key=lambda item: (max(depths[item[1].from_bus], depths[item[1].to_bus]), item[0]))
    mags = np.array(sol.state.magnitudes, dtype=float)
    angles = np.array(sol.state.angles, dtype=float)
    lam = network.lam
    ybus = network.ybus

    def total_obj(m: np.ndarray) -> float:
        v = m * np.exp(1j * angles)
        return float(lam @ (v * np.conj(ybus @ v)).real)

    def clamp_pairs(hold_vals: list[float], cos_t: float, kappa2: float):
        # (a, b) pairs with the branch term capped at kappa2, a taken from hold_vals
        pairs = []
        for a in hold_vals:
            for b in _curve_candidates(a, cos_t, kappa2, c):
                pairs.append((a, b))
        return pairs

    changed_any = False
    max_passes = max(16, 2 * network.n)
    for _pass in range(max_passes + 1):
        dirty = False
        for bi, br in limited:
            i, k = br.from_bus, br.to_bus
            yabs = abs(br.series_admittance)
            cap = br.thermal_limit
            cur = yabs * abs(
                mags[i] * np.exp(1j * angles[i]) - mags[k] * np.exp(1j * angles[k])
            )
            if cur <= cap * (1 + THERMAL_RTOL):
                continue
            if _pass == max_passes:
                raise AdjustmentError(
                    f"thermal correction did not settle after {max_passes} passes"
                )
            dirty = True
            changed_any = True
            hold, move = (i, k) if depths[i] < depths[k] else (k, i)
            if move in fixed_buses:
                raise BoundaryConflict(
                    f"branch {i}-{k} violates its thermal limit at a fixed boundary bus"
                )
            kappa2 = (cap / yabs) ** 2
            cos_t = math.cos(angles[i] - angles[k])

            options = clamp_pairs([float(mags[hold])], cos_t, kappa2)
            if not options and hold not in fixed_buses:
                # last resort: let the held side scan the box too
                grid = [float(a) for a in np.linspace(c.v_min, c.v_max, 201)]
                options = clamp_pairs(grid, cos_t, kappa2)
            if not options:
                raise InfeasibleError(
                    f"thermal limit {cap} on branch {i}-{k} admits no voltage "
                    "pair inside the magnitude box"
                )
            best_key = None
            best_pair = None
            for a, b in options:
                trial = mags.copy()
                trial[hold] = a
                trial[move] = b
                key = (round(_branch_term(a, b, cos_t), 12), total_obj(trial), -b)
                if best_key is None or key > best_key:
                    best_key = key
                    best_pair = (a, b)
            mags[hold], mags[move] = best_pair
        if not dirty:
            break
    if not changed_any:
        return sol
    state = VoltageState(magnitudes=mags, angles=angles)
    return finalize_solution(network, c, state, stage="thermal_adjusted")


# --- power-factor correction -------------------------------------------------


def adjust_power_factor(
    network: Network,
    c: ConstraintSet,
    sol: HCSolution,
    immutable: frozenset[int] = frozenset(),
) -> HCSolution:
    """Clamp generator reactive power to the pf band and re-solve voltages.

    Violating generator buses are converted to fixed-(P, Q) with P at its
    pattern value and Q on the nearest band edge, which puts their power
    factor exactly at eta.  The remaining buses hold their pattern voltages
    while a damped Newton iteration (damping 0.5, step tolerance 1e-9 so
    the residual stays well inside the pf tolerance, at most 100
    iterations) re-solves the converted buses.  Generators pushed into
    violation by the re-solve are converted in later rounds.  The re-solve
    normally moves magnitudes inward; driving one outside the box is
    reported as infeasible.
    """
    if c.eta is None:
        return sol
    gens = _gen_indices(network)
    if not gens:
        return sol
    kappa = math.sqrt(1.0 - c.eta * c.eta) / c.eta

    def violations(inj: InjectionProfile, exclude: set[int]) -> list[int]:
        out = []
        for i in gens:
            if i in exclude:
                continue
            if abs(inj.q[i]) > kappa * abs(inj.p[i]) + 1e-9:
                out.append(i)
        return out

    first = violations(sol.injections, set())
    if not first:
        return sol

    converted: dict[int, tuple[float, float]] = {}
    state = sol.state
    inj = sol.injections
    for _round in range(network.n + 1):
        newly = violations(inj, set(converted))
        if not newly and converted:
            break
        for i in newly:
            if i in immutable or i == network.slack_index:
                raise BoundaryConflict(
                    f"power-factor violation at fixed bus {i} cannot be corrected locally"
                )
            p_target = float(inj.p[i])
            q_edge = math.copysign(kappa * abs(p_target), inj.q[i])
            converted[i] = (p_target, q_edge)
        setpoints = []
        for b in network.buses:
            if b.id in converted:
                p_t, q_t = converted[b.id]
                setpoints.append(BusSetpoint(kind=BusKind.LOAD, p=p_t, q=q_t))
            else:
                setpoints.append(
                    BusSetpoint(
                        kind=BusKind.SLACK,
                        vm=float(state.magnitudes[b.id]),
                        va=float(state.angles[b.id]),
                    )
                )
        try:
            # damping 0.5 for robustness; the step tolerance must sit well
            # below the pf acceptance tolerance (eta - 1e-6), hence 1e-9
            state = solve_newton(
                network,
                setpoints,
                tol=1e-11,
                max_iter=100,
                x0=state,
                damping=0.5,
                step_tol=1e-9,
            )
        except PowerFlowError as exc:
            raise AdjustmentError(f"power-factor re-solve failed: {exc}") from exc
        inj = evaluate_injections(network, state)
    else:
        raise AdjustmentError("power-factor correction did not settle")

    mags = state.magnitudes
    if np.any(mags > c.v_max + BOX_ATOL) or np.any(mags < c.v_min - BOX_ATOL):
        slack = network.slack_index
        bad = [
            i
            for i in range(network.n)
            if i != slack and not (c.v_min - BOX_ATOL <= mags[i] <= c.v_max + BOX_ATOL)
        ]
        if bad:
            raise InfeasibleError(
                f"power-factor clamping drives buses {bad} outside the magnitude box"
            )
    pf = power_factors(network, inj)
    bad_pf = [i for i in gens if pf[i] < c.eta - PF_ATOL]
    if bad_pf:
        raise AdjustmentError(f"power factor still below eta at buses {bad_pf}")
    return finalize_solution(network, c, state, stage="pf_adjusted")


# --- full pipeline -----------------------------------------------------------


def _thermal_ok(network: Network, state: VoltageState) -> bool:
    return thermal_utilization(network, state) <= 1 + THERMAL_RTOL


def _pf_ok(network: Network, c: ConstraintSet, inj: InjectionProfile) -> bool:
    if c.eta is None:
        return True
    pf = power_factors(network, inj)
    return all(pf[i] >= c.eta - PF_ATOL for i in _gen_indices(network))


def solve_hc_stages(
    network: Network,
    c: ConstraintSet,
    immutable: frozenset[int] = frozenset(),
    depths: np.ndarray | None = None,
    root_vm: float | None = None,
) -> list[HCSolution]:
    """Run the constructive pipeline, returning each produced stage.

    Pattern stage, then thermal and power-factor corrections; the two
    corrections are repeated (bounded) until both limit families hold at
    once, since the power-factor re-solve can disturb a clamped current.
    ``depths``/``root_vm``/``immutable`` let a partitioned solve anchor a
    subsystem to the parity pattern and boundary values of its parent
    network.
    """
    sol = _pattern_stage(network, c, depths=depths, root_vm=root_vm)
    stages = [sol]
    for _ in range(8):
        t = adjust_thermal(network, c, sol, immutable=immutable)
        if t is not sol:
            stages.append(t)
        p = adjust_power_factor(network, c, t, immutable=immutable)
        if p is not t:
            stages.append(p)
        sol = p
        if _thermal_ok(network, sol.state) and _pf_ok(network, c, sol.injections):
            return stages
    raise AdjustmentError("thermal and power-factor corrections did not jointly settle")


def solve_hc(network: Network, c: ConstraintSet) -> HCSolution:
    """Globally optimal hosting capacity under the full constraint set."""
    return solve_hc_stages(network, c)[-1]
