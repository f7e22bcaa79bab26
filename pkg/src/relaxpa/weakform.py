"""Statistical checks of the weak (martingale-problem) formulation.

The joint state is P = (X, Yc) in R^{d+1}, where Yc is the discounted value
process started at 0 and U collects the initial value plus the discounted
orthogonal martingale:

    D_t = exp(-int_0^t k),
    dYc = D (f(a*) dt + z^T sigma dM~),     U_t = Y_0 + int D dL,

so that D Y = Yc + U.  For every test function phi,

    M^phi_t = phi(P_t) - int_0^t int L phi(s, P_s, z) m^Z(dz) ds

should be a martingale (and orthogonal to U), with
L phi = b . D phi + 1/2 a : D^2 phi, b = (sigma lam(a*), D f(a*)) and
a = sbar sbar^T, sbar = [sigma; D z^T sigma].
"""

from dataclasses import dataclass, field

import numpy as np

from .agent import hamiltonian
from .dynamics import lambda_field, mean_se
from .errors import InvalidArgumentError


@dataclass(frozen=True)
class DiscountedSplit:
    script_y: np.ndarray
    u_path: np.ndarray
    discount: np.ndarray

    @property
    def u_terminal(self):
        return self.u_path[:, -1]


def _discount(model, x, tg):
    n, N1, _ = x.shape
    rates = np.empty((n, N1 - 1))
    for i in range(N1 - 1):
        rates[:, i] = np.broadcast_to(model.k_disc(tg.times[i], x[:, i]), (n,))
    D = np.ones((n, N1))
    D[:, 1:] = np.exp(-np.cumsum(rates, axis=1) * tg.dt)
    return D


def _tilted_blocks(model, bundle):
    """Branch-block increments of M~^{A*}: (n, N, G, k)."""
    noise = bundle.noise
    G = len(bundle.z_weights)
    blocks = np.stack(
        [noise.set_increments((bundle.cell_branch == g).astype(float)) for g in range(G)], axis=2
    )
    if bundle.measure_tag == "PA":
        return blocks
    tg = noise.tg
    out = np.empty_like(blocks)
    for i in range(tg.n_steps):
        lam = lambda_field(model, tg.times[i], bundle.x[:, i], bundle.branch_actions[:, i])
        out[:, i] = blocks[:, i] - lam * bundle.z_weights[None, :, None] * tg.dt
    return out


def discounted_split(model, bundle):
    """Tabulate Yc and U on the bundle's ensemble."""
    tg = bundle.noise.tg
    x = bundle.x
    n, N1, d = x.shape
    N = N1 - 1
    D = _discount(model, x, tg)
    dmt = _tilted_blocks(model, bundle)
    w = bundle.z_weights
    ys = np.zeros((n, N1))
    u = np.empty((n, N1))
    u[:, 0] = bundle.y0
    for i in range(N):
        t = tg.times[i]
        G = len(w)
        fa = np.broadcast_to(model.f(t, x[:, i, None, :], bundle.branch_actions[:, i]), (n, G))
        sig = np.broadcast_to(model.sigma(t, x[:, i]), (n, d, model.k))
        zs = np.einsum("ngd,ndk->ngk", bundle.z_atoms[:, i], sig)
        incr = np.sum(fa * w[None, :], axis=1) * tg.dt + np.sum(zs * dmt[:, i], axis=(1, 2))
        ys[:, i + 1] = ys[:, i] + D[:, i] * incr
        u[:, i + 1] = u[:, i] + D[:, i] * bundle.l_increments[:, i]
    return DiscountedSplit(script_y=ys, u_path=u, discount=D)


def reconstruction_error(bundle, split):
    """max over paths/steps of |D Y - (Yc + U)|."""
    return float(np.max(np.abs(split.discount * bundle.y_path - split.script_y - split.u_path)))


@dataclass(frozen=True)
class JointPaths:
    """Everything the generator needs, on the grid points 0..N."""

    x: np.ndarray
    script_y: np.ndarray
    y: np.ndarray
    discount: np.ndarray
    z_atoms: np.ndarray
    z_weights: np.ndarray
    times: np.ndarray
    dt: float

    @property
    def state(self):
        return np.concatenate([self.x, self.script_y[..., None]], axis=2)


def joint_paths(model, bundle, split=None):
    split = split or discounted_split(model, bundle)
    tg = bundle.noise.tg
    n, N1, d = bundle.x.shape
    G = len(bundle.z_weights)
    z_end = np.stack(
        [np.broadcast_to(b(tg.T, bundle.x[:, -1], bundle.y_path[:, -1]), (n, d)) for b in bundle.z_policy.branches],
        axis=1,
    )
    z = np.concatenate([bundle.z_atoms, z_end[:, None]], axis=1)
    return JointPaths(
        x=bundle.x,
        script_y=split.script_y,
        y=bundle.y_path,
        discount=split.discount,
        z_atoms=z.reshape(n, N1, G, d),
        z_weights=bundle.z_weights,
        times=tg.times,
        dt=tg.dt,
    )


@dataclass(frozen=True)
class GeneratorSpec:
    model: object
    hspec: object

    def coefficients(self, t, x, y, z_atoms, D):
        """b (n, G, d+1) and sbar (n, G, d+1, k) per atom."""
        model = self.model
        n, G, d = z_atoms.shape
        xg = np.broadcast_to(x[:, None, :], (n, G, d))
        _, a = hamiltonian(self.hspec, t, xg, y[:, None], z_atoms)
        lam = lambda_field(model, t, x, a)
        sig = np.broadcast_to(model.sigma(t, x), (n, d, model.k))
        fa = np.broadcast_to(model.f(t, xg, a), (n, G))
        b = np.empty((n, G, d + 1))
        b[..., :d] = np.einsum("ndk,ngk->ngd", sig, lam)
        b[..., d] = D[:, None] * fa
        sbar = np.empty((n, G, d + 1, model.k))
        sbar[:, :, :d] = sig[:, None]
        sbar[:, :, d] = D[:, None, None] * np.einsum("ngd,ndk->ngk", z_atoms, sig)
        return b, sbar

    def a_mat(self, t, x, y, z_atoms, D):
        _, sbar = self.coefficients(t, x, y, z_atoms, D)
        return np.einsum("ngik,ngjk->ngij", sbar, sbar)

    def apply(self, phi, t, state, x, y, z_atoms, weights, D):
        """int L phi m^Z(dz) at one time for every path: (n,)."""
        b, sbar = self.coefficients(t, x, y, z_atoms, D)
        grad = phi.grad(state)
        hess = phi.hess(state)
        first = np.einsum("ngi,ni->ng", b, grad)
        second = 0.5 * np.einsum("ngik,ngjk,nij->ng", sbar, sbar, hess)
        return np.sum((first + second) * weights[None, :], axis=1)


def check_generator(gen, paths, n_probe=200, growth_const=None):
    """Symmetry / PSD of a and, optionally, the linear-quadratic growth bound
    |a| <= C (1 + |x| + |z^T sigma|^2) at probe points."""
    n = paths.x.shape[0]
    idx = np.linspace(0, n - 1, min(n, n_probe)).astype(int)
    worst = 0.0
    for i in range(0, len(paths.times) - 1, max(1, (len(paths.times) - 1) // 5)):
        x = paths.x[idx, i]
        z = paths.z_atoms[idx, i]
        A = gen.a_mat(paths.times[i], x, paths.y[idx, i], z, paths.discount[idx, i])
        if not np.allclose(A, np.swapaxes(A, -1, -2), atol=1e-12):
            return False, np.inf
        if np.min(np.linalg.eigvalsh(A)) < -1e-10 * max(1.0, np.max(np.abs(A))):
            return False, np.inf
        sig = np.broadcast_to(gen.model.sigma(paths.times[i], x), x.shape + (gen.model.k,))
        zs = np.einsum("ngd,ndk->ngk", z, sig)
        bound = 1 + np.linalg.norm(x, axis=1)[:, None] + np.sum(zs**2, axis=2)
        worst = max(worst, float(np.max(np.linalg.norm(A, ord=2, axis=(-2, -1)) / bound)))
    ok = growth_const is None or worst <= growth_const
    return ok, worst


# ---------------------------------------------------------------- test functions


@dataclass(frozen=True)
class ConstantFunction:
    c: float = 1.0

    def value(self, p):
        return np.full(p.shape[:-1], self.c)

    def grad(self, p):
        return np.zeros(p.shape)

    def hess(self, p):
        return np.zeros(p.shape + p.shape[-1:])


def _smoothstep(u):
    """C^4 plateau profile 1 -> 0 on [0, 1] with its first two derivatives.

    The degree-9 smoothstep has vanishing derivatives up to order 4 at both
    ends.  Lower-order profiles (the quintic is only C^2) leave a kink in the
    generator that shows up as a first-step bias when the ensemble starts
    inside the transition zone.
    """
    u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
    val = 126 * u**5 - 420 * u**6 + 540 * u**7 - 315 * u**8 + 70 * u**9
    d1 = 630 * u**4 - 2520 * u**5 + 3780 * u**6 - 2520 * u**7 + 630 * u**8
    d2 = 2520 * u**3 - 12600 * u**4 + 22680 * u**5 - 17640 * u**6 + 5040 * u**7
    return 1.0 - val, -d1, -d2


@dataclass(frozen=True)
class Bump:
    """Smooth bump, 1 on the scaled ball of radius r/2 and 0 outside radius r.

    Distances are measured after dividing each coordinate by ``scale``.
    """

    center: np.ndarray
    radius: float
    scale: np.ndarray

    @property
    def inner(self):
        return 0.5 * self.radius

    def _radial(self, p):
        q = (p - self.center) / self.scale
        rho = np.sqrt(np.sum(q * q, axis=-1))
        width = self.radius - self.inner
        val, d1, d2 = _smoothstep((rho - self.inner) / width)
        return q, rho, val, d1 / width, d2 / width**2

    def value(self, p):
        return self._radial(p)[2]

    def grad(self, p):
        q, rho, _, d1, _ = self._radial(p)
        safe = np.where(rho > 0, rho, 1.0)
        return (d1 / safe)[..., None] * q / self.scale

    def hess(self, p):
        q, rho, _, d1, d2 = self._radial(p)
        safe = np.where(rho > 0, rho, 1.0)
        e = q / safe[..., None]
        eye = np.eye(p.shape[-1])
        ee = e[..., :, None] * e[..., None, :]
        h = d2[..., None, None] * ee + (d1 / safe)[..., None, None] * (eye - ee)
        # zero inside the plateau (d1 = d2 = 0 there, also at rho = 0)
        s = 1.0 / self.scale
        return h * s[:, None] * s[None, :]

    def support_radius(self):
        return self.radius


WINDOWS = {
    "one": lambda p: np.ones(p.shape[0]),
    "tanh_x": lambda p: np.tanh(p[:, 0]),
    "tanh_y": lambda p: np.tanh(p[:, -1]),
    "cos_x": lambda p: np.cos(p[:, 0]),
    "sin_y": lambda p: np.sin(p[:, -1]),
    "gauss_x": lambda p: np.exp(-p[:, 0] ** 2),
}


@dataclass(frozen=True)
class TestFunctionBattery:
    __test__ = False

    functions: list
    names: list
    windows: dict = field(default_factory=lambda: dict(WINDOWS))


CENTER_OFFSETS = (0.0, 0.75, -0.75)
RADII = (0.5, 1.0, 2.0)


def default_battery(paths, anchor_time=None, offsets=CENTER_OFFSETS, radii=RADII):
    """9 bumps: 3 centres around the ensemble mean at ``anchor_time`` (default
    mid-horizon) x 3 radii in units of the per-coordinate pooled std."""
    state = paths.state
    i = len(paths.times) // 2 if anchor_time is None else int(np.argmin(np.abs(paths.times - anchor_time)))
    flat = state.reshape(-1, state.shape[-1])
    scale = np.maximum(flat.std(axis=0), 1e-8)
    mid = state[:, i].mean(axis=0)
    signs = np.array([(-1.0) ** j for j in range(state.shape[-1])])
    fns, names = [], []
    for oi, off in enumerate(offsets):
        c = mid + off * signs * scale
        for r in radii:
            fns.append(Bump(center=c, radius=r, scale=scale))
            names.append(f"bump_c{oi}_r{r:g}")
    return TestFunctionBattery(functions=fns, names=names)


def generator_values(gen, phi, paths):
    """L phi integrated against m^Z at every grid point: (n, N+1)."""
    state = paths.state
    n, N1, _ = state.shape
    Lphi = np.empty((n, N1))
    for i in range(N1):
        Lphi[:, i] = gen.apply(
            phi, paths.times[i], state[:, i], paths.x[:, i], paths.y[:, i],
            paths.z_atoms[:, i], paths.z_weights, paths.discount[:, i],
        )
    return Lphi


def compensated_process(gen, phi, paths, Lphi=None):
    """M^phi on the grid; the compensator uses the trapezoid rule."""
    state = paths.state
    N1 = state.shape[1]
    Lphi = generator_values(gen, phi, paths) if Lphi is None else Lphi
    comp = np.zeros(Lphi.shape)
    comp[:, 1:] = np.cumsum(0.5 * (Lphi[:, 1:] + Lphi[:, :-1]), axis=1) * paths.dt
    vals = np.stack([phi.value(state[:, i]) for i in range(N1)], axis=1)
    return vals - comp


def martingale_increment(M, Lphi, i, j, dt):
    """M^phi_{t_j} - M^phi_{t_i} with the end-corrected trapezoid rule.

    Gregory corrections of first and second order, built from one-sided
    differences of L phi, are applied once the window spans four steps.  They
    matter when the ensemble starts from a point sitting in the transition
    zone of a bump: there the plain trapezoid bias is visible against the
    Monte-Carlo error at 50 steps.
    """
    inc = M[:, j] - M[:, i]
    f = Lphi
    if j - i >= 4:
        d1 = (f[:, i + 1] - f[:, i]) - (f[:, j] - f[:, j - 1])
        d2 = (f[:, i + 2] - 2 * f[:, i + 1] + f[:, i]) + (f[:, j] - 2 * f[:, j - 1] + f[:, j - 2])
        # Gregory end corrections; the compensator enters M with a minus sign
        inc = inc - dt * (d1 / 12.0 - d2 / 24.0)
    return inc


@dataclass(frozen=True)
class ResidualReport:
    labels: list
    estimate: np.ndarray
    se: np.ndarray

    def z_scores(self):
        se = np.where(self.se > 0, self.se, np.inf)
        return np.where(self.se > 0, np.abs(self.estimate) / se, np.where(self.estimate == 0, 0.0, np.inf))

    def fraction_within(self, band=3.0):
        return float(np.mean(self.z_scores() <= band))

    def max_z(self):
        return float(np.max(self.z_scores()))


DEFAULT_PAIRS = ((0.0, 0.5), (0.5, 1.0), (0.0, 1.0))


def _pair_indices(paths, pairs):
    T = paths.times[-1]
    out = []
    for s, t in pairs:
        i = int(round(s * (len(paths.times) - 1) / T)) if T else 0
        j = int(round(t * (len(paths.times) - 1) / T)) if T else 0
        if not 0 <= i < j < len(paths.times):
            raise InvalidArgumentError(f"bad probe pair {(s, t)}")
        out.append((i, j))
    return out


def _residuals(gen, battery, paths, pairs, weight=None, pair_units="fraction"):
    state = paths.state
    idx = _pair_indices(paths, pairs) if pair_units == "fraction" else pairs
    labels, est, ses = [], [], []
    for name, phi in zip(battery.names, battery.functions):
        Lphi = generator_values(gen, phi, paths)
        M = compensated_process(gen, phi, paths, Lphi)
        for (i, j) in idx:
            inc = martingale_increment(M, Lphi, i, j, paths.dt)
            if weight is not None:
                inc = inc * weight
            for wname, h in battery.windows.items():
                m, se = mean_se(h(state[:, i]) * inc)
                labels.append((name, wname, float(paths.times[i]), float(paths.times[j])))
                est.append(m)
                ses.append(se)
    return ResidualReport(labels=labels, estimate=np.array(est), se=np.array(ses))


def generator_residual(gen, battery, paths, pairs=DEFAULT_PAIRS):
    """E[h_s (M^phi_t - M^phi_s)] +- SE for every (phi, h, (s, t)).

    ``pairs`` are fractions of the horizon."""
    return _residuals(gen, battery, paths, pairs)


def orthogonality_residual(gen, battery, paths, u_terminal, pairs=DEFAULT_PAIRS):
    """E[h_s U (M^phi_t - M^phi_s)] +- SE."""
    return _residuals(gen, battery, paths, pairs, weight=np.asarray(u_terminal, dtype=float))


@dataclass(frozen=True)
class TightnessReport:
    M_grid: np.ndarray
    exceed_prob: np.ndarray
    z_moment: float
    epsilon: float


def tightness_report(paths, epsilon, M_grid):
    """P[sigma^{M,eps} < T] for each M, where sigma^{M,eps} is the first grid
    time with max(|(X, Yc)|, int int |z|^{2+eps} m^Z ds) >= M."""
    if not epsilon > 0:
        raise InvalidArgumentError("epsilon must be positive")
    state = paths.state
    n, N1, _ = state.shape
    norms = np.linalg.norm(state, axis=2)
    zp = np.sum(np.sum(paths.z_atoms[:, :-1] ** 2, axis=3) ** (1 + epsilon / 2) * paths.z_weights, axis=2)
    cum = np.zeros((n, N1))
    cum[:, 1:] = np.cumsum(zp, axis=1) * paths.dt
    level = np.max(np.maximum(norms, cum)[:, :-1], axis=1)
    M_grid = np.asarray(M_grid, dtype=float)
    probs = np.array([np.mean(level >= M) for M in M_grid])
    return TightnessReport(M_grid=M_grid, exceed_prob=probs, z_moment=float(np.mean(cum[:, -1])), epsilon=float(epsilon))


def sup_moment(paths, p=2.0):
    """E sup_t |(X_t, Yc_t)|^p."""
    return float(np.mean(np.max(np.linalg.norm(paths.state, axis=2), axis=1) ** p))
