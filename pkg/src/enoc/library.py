"""Built-in problem library, closed-form references, and problem files.

Each builtin returns a fully certified :class:`~enoc.problem.ProblemSpec`
whose declared constants pass all four validators, plus enough metadata to
rebuild it from a manifest.  The scalar-coefficient linear family also ships
a closed-form optimum used as an external reference by the solvers' tests.

Problem files are JSON (format tag ``enoc-problem/1``) and either name a
builtin with parameters or define dynamics/cost through the expression
language of :mod:`enoc.expr` (variables ``t``, ``x1..xn``, ``u1..um`` and the
atom coordinates ``w1..wd``; grammar documented there).
"""

from __future__ import annotations

import itertools
import json
import os

import numpy as np
from scipy.integrate import quad

from .expr import Expression
from .measure import ParameterSpace
from .problem import ControlSchedule, DynamicsSpec, ProblemSpec, TerminalCostSpec

PROBLEM_FORMAT = "enoc-problem/1"


def _uniform_space(M, coords=None, weights=None):
    if coords is None:
        coords = np.zeros((M, 1)) if M == 1 else np.linspace(0.0, 1.0, M)[:, None]
    else:
        coords = np.asarray(coords, dtype=float)
        if coords.ndim == 1:
            coords = coords[:, None]
    if weights is None:
        weights = np.full(M, 1.0 / M)
    return ParameterSpace(weights=weights, coords=coords)


def _control_grid(rho, m, levels):
    """Cartesian product of `levels` points per axis on [-rho, rho]^m."""
    axis = np.linspace(-rho, rho, levels)
    pts = np.array(list(itertools.product(axis, repeat=m)))
    box = np.array([[-rho, rho]] * m)
    return ControlSchedule.constant(pts, box)


def _coeff_lipschitz(values, metric):
    """Largest |v_i - v_j| / d(i, j) over atom pairs (0 for a single atom)."""
    M = len(values)
    best = 0.0
    for i in range(M):
        for j in range(i + 1, M):
            d = metric[i, j]
            if d > 0:
                best = max(best, abs(values[i] - values[j]) / d)
    return best


def _per_atom_vectors(val, M, n, name):
    arr = np.asarray(val, dtype=float)
    if arr.ndim == 0:
        arr = np.full((M, n), float(arr))
    elif arr.ndim == 1:
        if arr.size == M and n == 1:
            arr = arr[:, None]
        elif arr.size == n:
            arr = np.tile(arr, (M, 1))
        else:
            raise ValueError(f"{name} must have {M} entries (n=1) or shape (M, {n})")
    if arr.shape != (M, n):
        raise ValueError(f"{name} must have shape ({M}, {n}), got {arr.shape}")
    return arr


def linear_ensemble(M=2, n=1, a=None, c=None, weights=None, coords=None,
                    rho=1.0, levels=3, T=1.0, box_radius=5.0):
    """Scalar-gain linear family: xdot = a_i x + u, terminal cost c_i . x.

    The control set is a `levels`-per-axis grid on the box [-rho, rho]^n.
    The cost is affine in the control integral, which gives the closed-form
    optimum exported by :func:`closed_form`.
    """
    space = _uniform_space(M, coords, weights)
    M = space.size
    a = np.full(M, 0.0) if a is None and M == 1 else (
        np.linspace(-1.0, 1.0, M) if a is None else np.asarray(a, dtype=float))
    if a.shape != (M,):
        raise ValueError(f"a must have one gain per atom ({M}), got shape {a.shape}")
    cvec = _per_atom_vectors(1.0 if c is None else c, M, n, "c")

    a_col = a[:, None]
    eye = np.eye(n)

    def f_eval(t, x, u, i):
        return a[i] * np.asarray(x, dtype=float) + np.asarray(u, dtype=float)

    def f_ens(t, X, u):
        return a_col * X + np.asarray(u, dtype=float)

    def jac_x(t, X, u):
        return a[:, None, None] * eye

    def jac_u(t, X, u):
        return np.broadcast_to(eye, (M, n, n))

    def g_eval(x, i):
        return float(cvec[i] @ np.asarray(x, dtype=float))

    def g_ens(X):
        return (X * cvec).sum(axis=-1)

    def g_grad(X):
        return np.broadcast_to(cvec, np.shape(X))

    amax = float(np.abs(a).max())
    growth_c = max(amax, rho * np.sqrt(n))
    lipschitz_k = amax if amax > 0 else 1.0
    L_a = _coeff_lipschitz(a, space.metric)
    osc_gain = T * L_a * box_radius * (1.0 + lipschitz_k * T * np.exp(lipschitz_k * T))

    def theta(r):
        return osc_gain * r

    # g is linear: c.x + b|x|^2 >= -|c|^2 / (4b) with b = 1
    lb_a = -0.25 * (cvec * cvec).sum(axis=1)

    dyn = DynamicsSpec(eval=f_eval, eval_ens=f_ens, jac_x_ens=jac_x, jac_u_ens=jac_u,
                       growth_c=growth_c, lipschitz_k=lipschitz_k, omega_modulus=theta)
    cost = TerminalCostSpec(eval=g_eval, eval_ens=g_ens, grad_ens=g_grad,
                            lower_bound_a=lb_a, lower_bound_b=1.0)
    meta = {"builtin": "linear-ensemble",
            "parameters": {"M": M, "n": n, "a": a.tolist(), "c": cvec.tolist(),
                           "weights": space.weights.tolist(),
                           "coords": space.coords.tolist(),
                           "rho": rho, "levels": levels, "T": T,
                           "box_radius": box_radius}}
    return ProblemSpec(space=space, n=n, m=n, dynamics=dyn, cost=cost,
                       controls=_control_grid(rho, n, levels), horizon=T, meta=meta)


def decoupled_quadratic(M=1, n=1, tau=None, weights=None, coords=None,
                        rho=1.0, levels=3, T=1.0):
    """Pure steering: xdot = u, terminal cost |x - tau_i|^2 per atom."""
    space = _uniform_space(M, coords, weights)
    M = space.size
    tau = _per_atom_vectors(0.0 if tau is None else tau, M, n, "tau")
    eye = np.eye(n)

    def f_eval(t, x, u, i):
        return np.asarray(u, dtype=float)

    def f_ens(t, X, u):
        return np.broadcast_to(np.asarray(u, dtype=float), np.shape(X))

    def jac_x(t, X, u):
        return np.zeros((M, n, n))

    def jac_u(t, X, u):
        return np.broadcast_to(eye, (M, n, n))

    def g_eval(x, i):
        d = np.asarray(x, dtype=float) - tau[i]
        return float(d @ d)

    def g_ens(X):
        d = X - tau
        return (d * d).sum(axis=-1)

    def g_grad(X):
        return 2.0 * (X - tau)

    dyn = DynamicsSpec(eval=f_eval, eval_ens=f_ens, jac_x_ens=jac_x, jac_u_ens=jac_u,
                       growth_c=max(rho * np.sqrt(n), 1e-6), lipschitz_k=1.0,
                       omega_modulus=lambda r: 0.0)
    cost = TerminalCostSpec(eval=g_eval, eval_ens=g_ens, grad_ens=g_grad,
                            lower_bound_a=np.zeros(M), lower_bound_b=0.0)
    meta = {"builtin": "decoupled-quadratic",
            "parameters": {"M": M, "n": n, "tau": tau.tolist(),
                           "weights": space.weights.tolist(),
                           "coords": space.coords.tolist(),
                           "rho": rho, "levels": levels, "T": T}}
    return ProblemSpec(space=space, n=n, m=n, dynamics=dyn, cost=cost,
                       controls=_control_grid(rho, n, levels), horizon=T, meta=meta)


def bilinear(M=2, n=1, a=None, weights=None, coords=None,
             rho=1.0, levels=3, T=1.0, box_radius=5.0):
    """Gain-modulated family: xdot = u a_i x with scalar control, cost |x|^2."""
    space = _uniform_space(M, coords, weights)
    M = space.size
    a = np.linspace(0.5, 1.5, M) if a is None else np.asarray(a, dtype=float)
    if a.shape != (M,):
        raise ValueError(f"a must have one gain per atom ({M}), got shape {a.shape}")
    eye = np.eye(n)

    def f_eval(t, x, u, i):
        return float(np.asarray(u).reshape(-1)[0]) * a[i] * np.asarray(x, dtype=float)

    def f_ens(t, X, u):
        return float(np.asarray(u).reshape(-1)[0]) * a[:, None] * X

    def jac_x(t, X, u):
        return float(np.asarray(u).reshape(-1)[0]) * a[:, None, None] * eye

    def jac_u(t, X, u):
        return (a[:, None] * X)[..., None]

    def g_eval(x, i):
        x = np.asarray(x, dtype=float)
        return float(x @ x)

    def g_ens(X):
        return (X * X).sum(axis=-1)

    def g_grad(X):
        return 2.0 * X

    amax = float(np.abs(a).max())
    cert = max(rho * amax, 1.0)
    L_a = _coeff_lipschitz(a, space.metric)
    osc_gain = T * rho * L_a * box_radius * (1.0 + cert * T * np.exp(cert * T))

    def theta(r):
        return osc_gain * r

    dyn = DynamicsSpec(eval=f_eval, eval_ens=f_ens, jac_x_ens=jac_x, jac_u_ens=jac_u,
                       growth_c=cert, lipschitz_k=cert, omega_modulus=theta)
    cost = TerminalCostSpec(eval=g_eval, eval_ens=g_ens, grad_ens=g_grad,
                            lower_bound_a=np.zeros(M), lower_bound_b=0.0)
    meta = {"builtin": "bilinear",
            "parameters": {"M": M, "n": n, "a": a.tolist(),
                           "weights": space.weights.tolist(),
                           "coords": space.coords.tolist(),
                           "rho": rho, "levels": levels, "T": T,
                           "box_radius": box_radius}}
    return ProblemSpec(space=space, n=n, m=1, dynamics=dyn, cost=cost,
                       controls=_control_grid(rho, 1, levels), horizon=T, meta=meta)


_BUILTINS = {
    "linear-ensemble": linear_ensemble,
    "decoupled-quadratic": decoupled_quadratic,
    "bilinear": bilinear,
}


def builtin(name, **parameters) -> ProblemSpec:
    """Build a library problem by name; unknown names raise KeyError."""
    try:
        factory = _BUILTINS[name]
    except KeyError:
        known = ", ".join(sorted(_BUILTINS))
        raise KeyError(f"unknown builtin problem {name!r}; known: {known}") from None
    return factory(**parameters)


class LinearEnsembleClosedForm:
    """Analytic optimum of the linear-ensemble family.

    The terminal cost is affine in the control through the weighted switching
    profile psi(sigma) = sum_i w_i c_i exp(a_i (T - sigma)); the pointwise
    minimizer over the box is -rho * sign(psi) and the optimal value is the
    affine free term minus rho times the integral of |psi|.
    """

    def __init__(self, p: ProblemSpec):
        if p.meta.get("builtin") != "linear-ensemble":
            raise ValueError("closed form is only available for linear-ensemble")
        par = p.meta["parameters"]
        self.a = np.asarray(par["a"], dtype=float)
        self.c = np.asarray(par["c"], dtype=float)
        self.w = p.space.weights
        self.rho = float(par["rho"])
        self.T = float(par["T"])
        self.n = int(par["n"])

    def psi(self, sigma):
        """Weighted switching profile, shape (n,)."""
        e = np.exp(self.a * (self.T - sigma))
        return (self.w[:, None] * self.c * e[:, None]).sum(axis=0)

    def optimal_control(self, sigma):
        """Pointwise minimizer -rho * sign(psi(sigma)) (0 on exact ties)."""
        return -self.rho * np.sign(self.psi(sigma))

    def optimal_value(self, s, phi) -> float:
        """Exact infimal cost from (s, phi) over measurable box controls."""
        e = np.exp(self.a * (self.T - s))
        affine = float((self.w[:, None] * self.c * e[:, None] * phi.values).sum())
        mod, _ = quad(lambda sig: float(np.abs(self.psi(sig)).sum()), s, self.T,
                      limit=200)
        return affine - self.rho * mod

    def optimal_signal(self, grid):
        """Piecewise-constant realization sampled at interval midpoints."""
        from .ensemble import ControlSignal
        mids = 0.5 * (grid.nodes[:-1] + grid.nodes[1:])
        vals = np.stack([self.optimal_control(t) for t in mids])
        return ControlSignal(grid, vals)


def closed_form(p: ProblemSpec) -> LinearEnsembleClosedForm:
    """Closed-form reference for problems that export one."""
    return LinearEnsembleClosedForm(p)


def cost_lipschitz_bound(p: ProblemSpec, radius: float) -> float:
    """Lipschitz certificate of the averaged terminal cost in the weighted norm.

    For the linear cost it is the weighted norm of the coefficient profile
    (global); for the quadratic costs it is the pointwise gradient bound on
    the ball of the given radius, Cauchy-Schwarzed through the weights.
    """
    name = p.meta.get("builtin")
    par = p.meta.get("parameters", {})
    w = p.space.weights
    if name == "linear-ensemble":
        c = np.asarray(par["c"], dtype=float)
        return float(np.sqrt((w[:, None] * c * c).sum()))
    if name == "decoupled-quadratic":
        tau = np.asarray(par["tau"], dtype=float)
        tmax = float(np.abs(tau).max()) if tau.size else 0.0
        return 2.0 * (radius + tmax) * float(np.sqrt(p.space.mass))
    if name == "bilinear":
        return 2.0 * radius * float(np.sqrt(p.space.mass))
    raise KeyError(f"no cost Lipschitz certificate for {name!r}")


# -- problem files ---------------------------------------------------------

def problem_from_dict(doc, base_dir=".") -> ProblemSpec:
    if doc.get("format") != PROBLEM_FORMAT:
        raise ValueError(
            f"unsupported problem format {doc.get('format')!r}, expected {PROBLEM_FORMAT!r}"
        )
    if "builtin" in doc:
        return builtin(doc["builtin"], **doc.get("parameters", {}))
    return _expression_problem(doc, base_dir)


def load_problem(path) -> ProblemSpec:
    with open(path) as fh:
        doc = json.load(fh)
    return problem_from_dict(doc, base_dir=os.path.dirname(os.path.abspath(path)))


def _expression_problem(doc, base_dir) -> ProblemSpec:
    space_ref = doc["space"]
    if isinstance(space_ref, str):
        space = ParameterSpace.load(os.path.join(base_dir, space_ref))
    else:
        space = ParameterSpace.from_dict(space_ref)
    n = int(doc["n"])
    m = int(doc["m"])
    T = float(doc["horizon"])
    d = 0 if space.coords is None else space.coords.shape[1]
    variables = (["t"] + [f"x{k+1}" for k in range(n)]
                 + [f"u{k+1}" for k in range(m)] + [f"w{k+1}" for k in range(d)])

    dyn_doc = doc["dynamics"]
    exprs = [Expression(src, variables) for src in dyn_doc["expressions"]]
    if len(exprs) != n:
        raise ValueError(f"need {n} dynamics expressions, got {len(exprs)}")
    coords = space.coords if d else np.zeros((space.size, 0))

    def env_for(t, X, u):
        env = {"t": t}
        for k in range(n):
            env[f"x{k+1}"] = X[..., k]
        uu = np.asarray(u, dtype=float).reshape(-1)
        for k in range(m):
            env[f"u{k+1}"] = uu[k]
        for k in range(d):
            env[f"w{k+1}"] = coords[:, k]
        return env

    def f_ens(t, X, u):
        env = env_for(t, np.asarray(X, dtype=float), u)
        comps = [np.broadcast_to(e(**env), np.shape(X)[:-1]) for e in exprs]
        return np.stack(comps, axis=-1).astype(float)

    def f_eval(t, x, u, i):
        X = np.broadcast_to(np.asarray(x, dtype=float), (space.size, n))
        return f_ens(t, X, u)[i]

    theta = None
    if "omega_modulus" in dyn_doc:
        texpr = Expression(dyn_doc["omega_modulus"], ["r"])
        theta = lambda r: float(texpr(r=r))

    dyn = DynamicsSpec(eval=f_eval, eval_ens=f_ens,
                       growth_c=float(dyn_doc["growth_c"]),
                       lipschitz_k=float(dyn_doc["lipschitz_k"]),
                       omega_modulus=theta)

    cost_doc = doc["cost"]
    cost_vars = ([f"x{k+1}" for k in range(n)] + [f"w{k+1}" for k in range(d)])
    gexpr = Expression(cost_doc["expression"], cost_vars)

    def g_ens(X):
        X = np.asarray(X, dtype=float)
        env = {}
        for k in range(n):
            env[f"x{k+1}"] = X[..., k]
        for k in range(d):
            env[f"w{k+1}"] = coords[:, k]
        return np.broadcast_to(gexpr(**env), np.shape(X)[:-1]).astype(float)

    def g_eval(x, i):
        X = np.zeros((space.size, n))
        X[i] = np.asarray(x, dtype=float)
        return float(g_ens(X)[i])

    lb_a = cost_doc.get("lower_bound_a", 0.0)
    lb_a = (np.full(space.size, float(lb_a)) if np.isscalar(lb_a)
            else np.asarray(lb_a, dtype=float))
    cost = TerminalCostSpec(eval=g_eval, eval_ens=g_ens, lower_bound_a=lb_a,
                            lower_bound_b=float(cost_doc.get("lower_bound_b", 0.0)))

    ctl = doc["controls"]
    controls = ControlSchedule(ctl["breakpoints"], ctl["sets"], ctl.get("box"))
    meta = {"doc": doc}
    return ProblemSpec(space=space, n=n, m=m, dynamics=dyn, cost=cost,
                       controls=controls, horizon=T, meta=meta)
