"""Principal side: contracts from (Y0, Z, L), constraints, optimisation.

A contract is generated forward:

    Y_{i+1} = Y_i - sum_g H(t_i, X_i, Y_i, z_g) w_g dt
                  + sum_j z_{b(j)}^T sigma dM0_ij + dL_i,

where branch g of the z-policy owns a contiguous block of cells with total
mass w_g (so m^Z has atoms z_g with weights w_g) and xi = U_a^{-1}(Y_T).
Under P^{A*} the same recursion runs on tilted noise,
dM0 = dM~ + lam(a*) mu dt, with a* the pointwise best response.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .agent import hamiltonian
from .dynamics import lambda_field, mean_se
from .errors import (
    InfeasibleError,
    InvalidArgumentError,
    ParticipationError,
    RangeError,
    SimulationError,
)
from .measure import L_CHANNEL, VALIDATION_CHANNEL, Y0_CHANNEL, path_normals, simulate_base_measure

OPTIMIZER_CHANNEL = 4


@dataclass(frozen=True)
class ZPolicy:
    """Branch maps (t, x (n, d), y (n,)) -> z (n, d) with branch weights."""

    branches: tuple = field(repr=False)
    weights: np.ndarray
    theta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    kind: str = "deterministic_feedback"

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "theta", np.atleast_1d(np.asarray(self.theta, dtype=float)))
        if len(w) != len(self.branches) or len(w) == 0:
            raise InvalidArgumentError("one weight per branch is required")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise InvalidArgumentError("branch weights must be positive and sum to 1")

    @property
    def n_branches(self):
        return len(self.branches)

    def cell_branch(self, grid):
        """Contiguous cell blocks: cell j goes to the branch whose cumulative
        weight interval contains its representative point."""
        if self.n_branches > grid.n_cells:
            raise InvalidArgumentError("more branches than cells")
        edges = np.cumsum(self.weights)
        edges[-1] = 1.0
        owner = np.searchsorted(edges, grid.cell_repr, side="right")
        owner = np.minimum(owner, self.n_branches - 1)
        if len(np.unique(owner)) != self.n_branches:
            raise InvalidArgumentError("branch weights are finer than the cell resolution")
        return owner

    def realised_weights(self, grid):
        owner = self.cell_branch(grid)
        return np.array([grid.cell_mass[owner == g].sum() for g in range(self.n_branches)])


def constant_z(value, d=1):
    z = np.broadcast_to(np.asarray(value, dtype=float), (d,)).copy()

    def branch(t, x, y):
        return np.broadcast_to(z, (x.shape[0], d))

    return ZPolicy(branches=(branch,), weights=[1.0], theta=z, kind="deterministic_feedback")


def feedback_z(fn, theta):
    """Deterministic feedback z = fn(theta, t, x, y)."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))

    def branch(t, x, y):
        return fn(theta, t, x, y)

    return ZPolicy(branches=(branch,), weights=[1.0], theta=theta, kind="deterministic_feedback")


def randomized_z(branch_fns, weights, theta=()):
    return ZPolicy(branches=tuple(branch_fns), weights=weights, theta=theta, kind="randomized")


def two_point_z(a, b, d=1):
    """Atoms a and b with weight 1/2 each, constant in (t, x, y)."""
    fa, fb = constant_z(a, d).branches[0], constant_z(b, d).branches[0]
    return randomized_z([fa, fb], [0.5, 0.5], theta=[a, b])


@dataclass(frozen=True)
class LPolicy:
    kind: str = "zero"
    psi: Optional[Callable] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("zero", "independent_noise"):
            raise InvalidArgumentError(f"unknown L policy kind {self.kind!r}")
        if self.kind == "independent_noise" and self.psi is None:
            raise InvalidArgumentError("independent_noise needs an integrand psi")


def constant_l(scale):
    return LPolicy("independent_noise", lambda t, x, y: np.full(x.shape[0], float(scale)))


@dataclass(frozen=True)
class Y0Draw:
    """Independent initial draw Y0 ~ N(mean, std^2) (enlarged filtration)."""

    mean: float
    std: float


@dataclass(frozen=True)
class ContractBundle:
    y0: np.ndarray
    z_policy: ZPolicy
    l_policy: LPolicy
    y_path: np.ndarray
    xi: np.ndarray
    feasible: np.ndarray
    x: np.ndarray = field(repr=False)
    z_atoms: np.ndarray = field(repr=False)
    z_weights: np.ndarray = field(repr=False)
    cell_branch: np.ndarray = field(repr=False)
    branch_actions: np.ndarray = field(repr=False)
    l_increments: np.ndarray = field(repr=False)
    noise: object = field(repr=False)
    measure_tag: str = "P0"
    applied_actions: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_paths(self):
        return self.y_path.shape[0]

    def z_field(self):
        """Per-cell z: (n, N, C, d)."""
        return self.z_atoms[:, :, self.cell_branch]

    def cell_actions(self):
        """Best-response action per cell: (n, N, C)."""
        return self.branch_actions[:, :, self.cell_branch]

    def x_terminal(self):
        return self.x[:, -1]


def _initial_y(y0, n, seed):
    if isinstance(y0, Y0Draw):
        draws = path_normals(seed, Y0_CHANNEL, n, (1,))[:, 0]
        return y0.mean + y0.std * draws, float(y0.mean)
    y0 = float(y0)
    return np.full(n, y0), y0


def _l_noise(l_policy, n, N, dt, seed):
    if l_policy.kind == "zero":
        return None
    return path_normals(seed, L_CHANNEL, n, (N,)) * np.sqrt(dt)


def _forward(
    model, hspec, y0, z_policy, l_policy, noise,
    x_given=None, tilted=False, r0=-np.inf, max_infeasible=0.0, override=None,
):
    n, N, C, k = noise.increments.shape
    grid, tg = noise.grid, noise.tg
    d = model.d
    dt, times = tg.dt, tg.times
    y_init, y0_mean = _initial_y(y0, n, noise.seed)
    if y0_mean < r0:
        raise ParticipationError(f"E[Y0] = {y0_mean} is below the reservation utility {r0}")
    owner = z_policy.cell_branch(grid)
    G = z_policy.n_branches
    w = np.array([grid.cell_mass[owner == g].sum() for g in range(G)])
    block = np.stack([owner == g for g in range(G)]).astype(float)
    # dM over each branch block, summed in fixed cell order: (n, N, G, k)
    dm_blocks = np.stack([noise.set_increments(block[g]) for g in range(G)], axis=2)
    dl_noise = _l_noise(l_policy, n, N, dt, noise.seed)

    x = np.empty((n, N + 1, d)) if x_given is None else x_given
    if x_given is None:
        x[:, 0] = model.x0
    y = np.empty((n, N + 1))
    y[:, 0] = y_init
    z_atoms = np.empty((n, N, G, d))
    actions = np.empty((n, N, G))
    dl = np.zeros((n, N))
    applied = None if override is None else np.empty((n, N, C))
    for i in range(N):
        t = times[i]
        xi_, yi = x[:, i], y[:, i]
        for g, branch in enumerate(z_policy.branches):
            z_atoms[:, i, g] = np.broadcast_to(branch(t, xi_, yi), (n, d))
        H, a = hamiltonian(hspec, t, np.broadcast_to(xi_[:, None], (n, G, d)), yi[:, None], z_atoms[:, i])
        actions[:, i] = a
        drift_y = np.sum(H * w[None, :], axis=1)
        sig = np.broadcast_to(model.sigma(t, xi_), (n, d, k))
        dm0 = dm_blocks[:, i]
        if override is not None:
            # the agent plays its own control; the contract still pays via z
            a_cells = np.broadcast_to(np.asarray(override(t, xi_, yi, a[:, owner]), dtype=float), (n, C))
            applied[:, i] = a_cells
            lam_c = lambda_field(model, t, xi_, a_cells)
            dm0_c = noise.increments[:, i] + lam_c * grid.cell_mass[None, :, None] * dt
            dm0 = np.einsum("nck,gc->ngk", dm0_c, block)
            x[:, i + 1] = xi_ + np.einsum("ndk,nk->nd", sig, np.sum(dm0_c, axis=1))
        elif tilted:
            lam = lambda_field(model, t, xi_, a)
            dm0 = dm0 + lam * w[None, :, None] * dt
            if x_given is None:
                x[:, i + 1] = xi_ + np.einsum("ndk,nk->nd", sig, np.sum(dm0, axis=1))
        elif x_given is None:
            x[:, i + 1] = xi_ + np.einsum("ndk,nk->nd", sig, np.sum(dm0, axis=1))
        zs = np.einsum("ngd,ndk->ngk", z_atoms[:, i], sig)
        diff_y = np.sum(zs * dm0, axis=(1, 2))
        if dl_noise is not None:
            dl[:, i] = np.broadcast_to(l_policy.psi(t, xi_, yi), (n,)) * dl_noise[:, i]
        y[:, i + 1] = yi - drift_y * dt + diff_y + dl[:, i]
        bad = ~np.isfinite(y[:, i + 1])
        if np.any(bad):
            p = int(np.argmax(bad))
            raise SimulationError(f"continuation value blew up on path {p}", path_index=p)

    feasible = model.in_ua_range(y[:, -1])
    frac = 1.0 - feasible.mean()
    if frac > max_infeasible:
        raise RangeError(f"Y_T leaves the range of U_a on {frac:.2%} of paths")
    xi = np.full(n, np.nan)
    xi[feasible] = np.asarray(model.ua_inv(y[feasible, -1]), dtype=float)
    return ContractBundle(
        y0=y_init,
        z_policy=z_policy,
        l_policy=l_policy,
        y_path=y,
        xi=xi,
        feasible=feasible,
        x=x,
        z_atoms=z_atoms,
        z_weights=w,
        cell_branch=owner,
        branch_actions=actions,
        l_increments=dl,
        noise=noise,
        measure_tag="PA" if tilted else "P0",
        applied_actions=applied,
    )


def generate_contract(model, hspec, y0, z_policy, l_policy, states, r0=-np.inf, max_infeasible=0.0):
    """Forward contract on a P0 ensemble (X is taken from ``states``)."""
    return _forward(
        model, hspec, y0, z_policy, l_policy, states.driven_by,
        x_given=states.x, tilted=False, r0=r0, max_infeasible=max_infeasible,
    )


def simulate_contract_controlled(model, hspec, y0, z_policy, l_policy, noise, r0=-np.inf, max_infeasible=0.0):
    """Joint (X, Y) under P^{A*}: ``noise`` plays the role of M~^{A*}."""
    return _forward(
        model, hspec, y0, z_policy, l_policy, noise,
        x_given=None, tilted=True, r0=r0, max_infeasible=max_infeasible,
    )


def simulate_agent_response(model, hspec, y0, z_policy, l_policy, noise, override, max_infeasible=1.0):
    """Joint (X, Y) when the agent deviates to ``override(t, x, y, a_star)``.

    ``a_star`` is the per-cell best response (n, C); the override returns the
    action actually played on every cell.  ``noise`` plays the role of M~^A,
    and ``bundle.applied_actions`` records A.
    """
    return _forward(
        model, hspec, y0, z_policy, l_policy, noise,
        x_given=None, tilted=True, max_infeasible=max_infeasible, override=override,
    )


def agent_states(bundle):
    """StatePaths view of a bundle for agent-side valuation (plain means)."""
    from .dynamics import StatePaths

    actions = bundle.applied_actions if bundle.applied_actions is not None else bundle.cell_actions()
    return StatePaths(x=bundle.x, driven_by=bundle.noise, measure_tag=bundle.measure_tag, actions=actions)


def terminal_output(x, xi):
    return x[:, -1, 0] - xi


@dataclass(frozen=True)
class PrincipalSpec:
    up: Callable = field(default=terminal_output, repr=False)
    r0: float = 0.0
    constraints: tuple = ()
    constraint_names: tuple = ()
    q: float = 2.0
    q_prime: float = 3.0
    R: float = np.inf
    penalty_schedule: tuple = (10.0, 100.0, 1000.0)
    feasibility_tol: float = 0.01

    def __post_init__(self):
        if not self.constraint_names:
            object.__setattr__(self, "constraint_names", tuple(f"g{i + 1}" for i in range(len(self.constraints))))
        if len(self.constraint_names) != len(self.constraints):
            raise InvalidArgumentError("one name per constraint")
        if any(b <= a for a, b in zip(self.penalty_schedule[:-1], self.penalty_schedule[1:])):
            raise InvalidArgumentError("penalty schedule must be increasing")


def nonnegative_payment(x, xi):
    """g = 1 - 1{xi >= 0}."""
    return 1.0 - (xi >= 0).astype(float)


def bounded_payment(cap):
    """g = 1 - 1{cap(X) >= xi}."""

    def g(x, xi):
        return 1.0 - (cap(x) >= xi).astype(float)

    return g


def call_cap(x):
    """l(X) = max(X_T, 0) + 1."""
    return np.maximum(x[:, -1, 0], 0.0) + 1.0


def _require_feasible(bundle):
    if not np.all(bundle.feasible):
        raise RangeError("contract has paths with Y_T outside the range of U_a")


def evaluate_constraints(spec, bundle):
    """[(E[g_i], SE)] under the bundle's measure."""
    _require_feasible(bundle)
    out = []
    for g in spec.constraints:
        vals = np.asarray(g(bundle.x, bundle.xi), dtype=float)
        m, se = mean_se(vals)
        out.append((float(m), float(se)))
    return out


def principal_value(spec, bundle):
    _require_feasible(bundle)
    vals = np.asarray(spec.up(bundle.x, bundle.xi), dtype=float)
    m, se = mean_se(vals)
    return float(m), float(se)


@dataclass(frozen=True)
class PolicySpace:
    """theta -> ZPolicy with box bounds; Y0 optionally searched in ``y0_bounds``."""

    build: Callable = field(repr=False)
    lower: np.ndarray
    upper: np.ndarray
    y0_bounds: Optional[tuple] = None
    names: tuple = ()
    init: tuple = ()
    l_policy: LPolicy = field(default_factory=LPolicy)

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape or np.any(hi < lo):
            raise InvalidArgumentError("policy bounds must satisfy lower <= upper")

    def bounds(self, r0):
        lo, hi = self.lower, self.upper
        if self.y0_bounds is not None:
            y_lo = max(self.y0_bounds[0], r0)
            y_hi = max(self.y0_bounds[1], y_lo)
            lo = np.concatenate([[y_lo], lo])
            hi = np.concatenate([[y_hi], hi])
        return lo, hi

    def split(self, params, r0):
        if self.y0_bounds is None:
            return float(r0), params
        return float(params[0]), params[1:]


def constant_space(z_lo, z_hi, y0_bounds=None):
    return PolicySpace(build=lambda th: constant_z(th[0]), lower=[z_lo], upper=[z_hi], y0_bounds=y0_bounds, names=("z",))


def damped_z(theta, t, x, y):
    """z = theta_z * clip(Y / theta_c, 0, 1): effort incentives fade as Y -> 0."""
    return (theta[0] * np.clip(y / theta[1], 0.0, 1.0))[:, None]


def damped_space(z_hi=2.0, c_bounds=(0.05, 2.0), y0_bounds=(0.0, 1.5), init=()):
    return PolicySpace(
        build=lambda th: feedback_z(damped_z, th),
        lower=[0.0, c_bounds[0]],
        upper=[z_hi, c_bounds[1]],
        y0_bounds=y0_bounds,
        names=("theta_z", "theta_c"),
        init=init,
    )


def randomized_damped_space(z_hi=2.0, c_bounds=(0.05, 2.0), y0_bounds=(0.0, 1.5), init=()):
    """Two branches (weight 1/2) with separate theta_z and a shared theta_c."""

    def build(th):
        b1 = lambda t, x, y: damped_z((th[0], th[2]), t, x, y)  # noqa: E731
        b2 = lambda t, x, y: damped_z((th[1], th[2]), t, x, y)  # noqa: E731
        return randomized_z([b1, b2], [0.5, 0.5], theta=th)

    return PolicySpace(
        build=build,
        lower=[0.0, 0.0, c_bounds[0]],
        upper=[z_hi, z_hi, c_bounds[1]],
        y0_bounds=y0_bounds,
        names=("theta_z1", "theta_z2", "theta_c"),
        init=init,
    )


@dataclass(frozen=True)
class Evaluation:
    params: np.ndarray
    value: float
    se: float
    constraints: tuple
    failed: bool = False

    def violation(self):
        return max([0.0] + [m for m, _ in self.constraints])

    def penalised(self, rho):
        if self.failed:
            return -np.inf
        return self.value - rho * sum(max(0.0, m) ** 2 for m, _ in self.constraints)


@dataclass(frozen=True)
class OptimizationResult:
    params: np.ndarray
    y0: float
    theta: np.ndarray
    value: float
    se: float
    feasible: bool
    constraints: tuple
    validation: tuple
    history: list = field(repr=False)
    n_evaluations: int = 0


def evaluate_candidate(model, hspec, spec, space, params, noise):
    y0, theta = space.split(params, spec.r0)
    try:
        bundle = simulate_contract_controlled(model, hspec, y0, space.build(theta), space.l_policy, noise, r0=spec.r0)
        v, se = principal_value(spec, bundle)
        cons = tuple(evaluate_constraints(spec, bundle))
    except (RangeError, SimulationError, ParticipationError):
        return Evaluation(np.array(params), -np.inf, np.inf, tuple((np.inf, 0.0) for _ in spec.constraints), failed=True)
    return Evaluation(np.array(params), v, se, cons)


def optimize_principal(
    model,
    hspec,
    spec,
    space,
    grid,
    tg,
    n_paths,
    seed,
    budget=256,
    population=32,
    elite=8,
    smoothing=0.2,
    validation_paths=None,
    select_tol=None,
    on_infeasible="report",
):
    """Cross-entropy search over (Y0, theta) with a staged quadratic penalty.

    All candidates share one noise ensemble (common random numbers).  The
    reported optimum is the best candidate whose training constraint means lie
    below ``select_tol`` and that is confirmed feasible on a fresh ensemble.
    """
    lo, hi = space.bounds(spec.r0)
    if budget < 1:
        raise InvalidArgumentError("budget must be >= 1")
    noise = simulate_base_measure(grid, tg, model.k, n_paths, seed)
    history = []

    def run(params):
        ev = evaluate_candidate(model, hspec, spec, space, np.clip(params, lo, hi), noise)
        history.append(ev)
        return ev

    if np.all(hi == lo):
        run(lo.copy())
    else:
        if budget < population:
            raise InvalidArgumentError("budget must be at least the population size")
        rng = np.random.Generator(np.random.Philox(key=[int(seed), OPTIMIZER_CHANNEL]))
        mean = 0.5 * (lo + hi)
        std = 0.3 * (hi - lo)
        for p in space.init:
            run(np.asarray(p, dtype=float))
        schedule = spec.penalty_schedule or (0.0,)
        remaining = budget - len(history)
        n_gen = max(1, remaining // population)
        for gen in range(n_gen):
            rho = schedule[min(len(schedule) - 1, gen * len(schedule) // n_gen)]
            cand = np.clip(mean + std * rng.standard_normal((population, len(lo))), lo, hi)
            evs = [run(c) for c in cand]
            scores = np.array([e.penalised(rho) for e in evs])
            order = np.argsort(-scores, kind="stable")[:elite]
            pts = cand[order]
            mean = smoothing * mean + (1 - smoothing) * pts.mean(axis=0)
            std = smoothing * std + (1 - smoothing) * pts.std(axis=0)
            std = np.maximum(std, 1e-6 * (hi - lo))

    tol = spec.feasibility_tol / 2 if select_tol is None else select_tol
    ok = [e for e in history if not e.failed and all(m <= tol for m, _ in e.constraints)]
    ok.sort(key=lambda e: -e.value)
    val_noise = None
    chosen, validation = None, ()
    for ev in ok[:10]:
        if not spec.constraints:
            chosen = ev
            break
        if val_noise is None:
            val_noise = simulate_base_measure(grid, tg, model.k, validation_paths or n_paths, seed, channel=VALIDATION_CHANNEL)
        val = evaluate_candidate(model, hspec, spec, space, ev.params, val_noise)
        if not val.failed and all(m <= spec.feasibility_tol for m, _ in val.constraints):
            chosen, validation = ev, val.constraints
            break
    feasible = chosen is not None
    if chosen is None:
        valid = [e for e in history if not e.failed] or history
        chosen = min(valid, key=lambda e: (e.violation(), -e.value))
        if on_infeasible == "raise":
            raise InfeasibleError("no candidate satisfies the constraints", best_violation=chosen.violation())
    y0, theta = space.split(chosen.params, spec.r0)
    return OptimizationResult(
        params=chosen.params,
        y0=y0,
        theta=np.asarray(theta),
        value=chosen.value,
        se=chosen.se,
        feasible=feasible,
        constraints=chosen.constraints,
        validation=validation,
        history=history,
        n_evaluations=len(history),
    )


@dataclass(frozen=True)
class MomentReport:
    z_moment: float
    u_moment: float
    in_K: Optional[bool]
    q: float
    q_prime: float
    R: float


def z_moment_paths(z_atoms, weights, dt, q):
    """Cumulative int_0^t int |z|^{2q} m^Z(dz) ds per path: (n, N+1)."""
    norms = np.sum(np.asarray(z_atoms, dtype=float) ** 2, axis=3) ** q
    step = np.sum(norms * np.asarray(weights)[None, None, :], axis=2) * dt
    out = np.zeros((step.shape[0], step.shape[1] + 1))
    np.cumsum(step, axis=1, out=out[:, 1:])
    return out


def z_moment(bundle, q):
    """E sum_i sum_g |z_g|^{2q} w_g dt."""
    return float(np.mean(z_moment_paths(bundle.z_atoms, bundle.z_weights, bundle.noise.tg.dt, q)[:, -1]))


def moment_diagnostics(bundle, q, q_prime, R=np.inf, u_terminal=None, model=None):
    """Moments entering the compactness set K_{q,q',R}.

    ``u_terminal`` is the discounted orthogonal part U; when omitted it is
    rebuilt from the bundle (requires ``model`` for the discount rate).
    """
    if u_terminal is None:
        from .weakform import discounted_split

        if model is None:
            raise InvalidArgumentError("need the model to rebuild U")
        u_terminal = discounted_split(model, bundle).u_terminal
    zm = z_moment(bundle, q)
    um = float(np.mean(np.abs(np.asarray(u_terminal, dtype=float)) ** q_prime))
    in_k = None
    if np.isfinite(R):
        if not (q > 1 and q_prime > 1 and 1.0 / q + 1.0 / q_prime < 1.0):
            raise InvalidArgumentError("membership needs q, q' > 1 with 1/q + 1/q' < 1")
        in_k = bool(zm + um <= R)
    return MomentReport(z_moment=zm, u_moment=um, in_K=in_k, q=float(q), q_prime=float(q_prime), R=float(R))

