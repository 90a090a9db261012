"""Brute-force derivative oracles.

Everything here is deliberately naive: finite differences over explicit
solves of the lower-level problem, so that the closed forms used by the
optimizer can be judged by something that shares none of their algebra.

The toy bilevel problem is::

    theta*(m) = argmin_theta  l(m * theta) + gamma/2 |theta|^2
    F(m)      = l(m * theta*(m))

Jacobians follow the column convention ``J[j, i] = d theta*_j / d m_i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bip import objective_grad_m
from .models import Network, grad_z, loss_at

FAMILIES = ("linear", "quadratic")
EPS_FIRST = 1e-5
EPS_SECOND = 1e-4


class OracleError(RuntimeError):
    pass


@dataclass
class ToyBilevel:
    family: str
    gamma: float
    c: Optional[np.ndarray] = None
    A: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    tol: float = 1e-10

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown loss family {self.family!r}")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if self.family == "linear" and self.c is None:
            raise ValueError("linear family needs c")
        if self.family == "quadratic" and (self.A is None or self.b is None):
            raise ValueError("quadratic family needs A and b")

    @property
    def n(self) -> int:
        return len(self.c) if self.family == "linear" else self.A.shape[1]

    def loss(self, z) -> float:
        if self.family == "linear":
            return float(self.c @ z)
        r = self.A @ z - self.b
        return 0.5 * float(r @ r)

    def grad(self, z) -> np.ndarray:
        if self.family == "linear":
            return self.c.copy()
        return self.A.T @ (self.A @ z - self.b)

    def hess(self) -> np.ndarray:
        if self.family == "linear":
            return np.zeros((self.n, self.n))
        return self.A.T @ self.A

    def stationarity(self, m, theta) -> np.ndarray:
        return m * self.grad(m * theta) + self.gamma * theta


def make_toy(family, n=10, gamma=1.0, seed=0, rows=None) -> ToyBilevel:
    if n > 20:
        raise ValueError("toy problems are limited to n <= 20")
    rng = np.random.default_rng(seed)
    if family == "linear":
        return ToyBilevel("linear", gamma, c=rng.standard_normal(n))
    rows = rows or n + 2
    return ToyBilevel("quadratic", gamma, A=rng.standard_normal((rows, n)) / np.sqrt(rows),
                      b=rng.standard_normal(rows))


def solve_lower(tb: ToyBilevel, m) -> np.ndarray:
    """Exact minimizer of the lower-level problem, self-checked on its residual."""
    m = np.asarray(m, dtype=np.float64)
    if tb.family == "linear":
        theta = -m * tb.c / tb.gamma
    else:
        Am = tb.A * m
        theta = np.linalg.solve(Am.T @ Am + tb.gamma * np.eye(tb.n), m * (tb.A.T @ tb.b))
    res = np.max(np.abs(tb.stationarity(m, theta))) if tb.n else 0.0
    if res >= tb.tol:
        raise OracleError(f"lower-level residual {res:.3e} exceeds {tb.tol:g}")
    return theta


def ig_fd(tb: ToyBilevel, m, eps=EPS_FIRST) -> np.ndarray:
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    m = np.asarray(m, dtype=np.float64)
    J = np.empty((tb.n, tb.n))
    for i in range(tb.n):
        e = np.zeros(tb.n)
        e[i] = eps
        J[:, i] = (solve_lower(tb, m + e) - solve_lower(tb, m - e)) / (2 * eps)
    return J


def mixed_hessian(tb: ToyBilevel, m, theta) -> np.ndarray:
    """d(grad_theta l(m * theta)) / dm, rows over theta, columns over m.

    Differentiating ``m_j g_j(m * theta)`` in ``m_i`` gives
    ``delta_ij g_j + m_j H_ji theta_i``.
    """
    g = tb.grad(m * theta)
    return np.diag(g) + (m[:, None] * tb.hess()) * theta[None, :]


def ig_exact(tb: ToyBilevel, m) -> np.ndarray:
    """Implicit gradient from the stationarity condition:
    ``-(d^2 g/d theta^2)^{-1} d(grad_theta g)/dm``."""
    m = np.asarray(m, dtype=np.float64)
    theta = solve_lower(tb, m)
    H = tb.hess()
    inner = (m[:, None] * H) * m[None, :] + tb.gamma * np.eye(tb.n)
    return -np.linalg.solve(inner, mixed_hessian(tb, m, theta))


def ig_first_order(tb: ToyBilevel, m) -> np.ndarray:
    """The Hessian-free implicit gradient ``-(1/gamma) diag(grad l)``."""
    m = np.asarray(m, dtype=np.float64)
    theta = solve_lower(tb, m)
    return -np.diag(tb.grad(m * theta)) / tb.gamma


def composed_objective(tb: ToyBilevel, m) -> float:
    m = np.asarray(m, dtype=np.float64)
    return tb.loss(m * solve_lower(tb, m))


def ig_objective_fd(tb: ToyBilevel, m, eps=EPS_FIRST) -> np.ndarray:
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    m = np.asarray(m, dtype=np.float64)
    out = np.empty(tb.n)
    for i in range(tb.n):
        e = np.zeros(tb.n)
        e[i] = eps
        out[i] = (composed_objective(tb, m + e) - composed_objective(tb, m - e)) / (2 * eps)
    return out


def objective_grad_exact(tb: ToyBilevel, m, ig=None) -> np.ndarray:
    """Chain rule through theta*: ``theta* g + J^T (m g)``."""
    m = np.asarray(m, dtype=np.float64)
    theta = solve_lower(tb, m)
    g = tb.grad(m * theta)
    J = ig_exact(tb, m) if ig is None else ig
    return theta * g + J.T @ (m * g)


def objective_grad_first_order(tb: ToyBilevel, m) -> np.ndarray:
    """The optimizer's own formula, evaluated at the exact lower-level solution."""
    m = np.asarray(m, dtype=np.float64)
    theta = solve_lower(tb, m)
    return objective_grad_m(theta, m, tb.grad(m * theta), tb.gamma)


def rel_error(a, b, floor=0.0) -> float:
    """Max elementwise |a - b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 0, np.abs(a - b) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(r.max()) if r.size else 0.0


def rel_frobenius(a, b) -> float:
    nb = np.linalg.norm(b)
    diff = np.linalg.norm(np.asarray(a) - np.asarray(b))
    return diff / nb if nb > 0 else diff


def ig_contribution_sweep(family="linear", gammas=(1.0, 10.0, 100.0), n=10, seed=0, m=None):
    """Size of the implicit-gradient part of dF/dm (brute force minus the
    direct ``theta* g`` term) across gamma. Returns (gammas, sizes, slope)
    with the slope fitted on log-log axes."""
    sizes = []
    for gamma in gammas:
        tb = make_toy(family, n, gamma, seed)
        mm = np.full(n, 0.5) if m is None else np.asarray(m, dtype=np.float64)
        theta = solve_lower(tb, mm)
        direct = theta * tb.grad(mm * theta)
        sizes.append(np.linalg.norm(ig_objective_fd(tb, mm) - direct))
    slope = np.polyfit(np.log(gammas), np.log(sizes), 1)[0]
    return np.asarray(gammas, dtype=np.float64), np.asarray(sizes), float(slope)


# ---- network-level checks -------------------------------------------------

def fd_grad(net: Network, z, batch, eps=EPS_FIRST) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    for i in range(len(z)):
        zp = z.copy()
        zm = z.copy()
        zp[i] += eps
        zm[i] -= eps
        out[i] = (loss_at(net, zp, batch) - loss_at(net, zm, batch)) / (2 * eps)
    return out


def gradient_check(net: Network, z, batch, eps=EPS_FIRST) -> float:
    """Max relative error of the analytic gradient against central differences.

    Entries below 1e-4 of the largest gradient component are compared on
    that scale, where the difference quotient carries no relative accuracy.
    """
    a = grad_z(net, z, batch)
    f = fd_grad(net, z, batch, eps)
    return rel_error(a, f, floor=1e-4 * max(np.abs(f).max(), 1e-12))


def _smooth(net: Network) -> bool:
    return not any(layer.kind == "relu" for layer in net.layers)


def fd_hessian(net: Network, z, batch, eps=EPS_SECOND) -> np.ndarray:
    """Hessian of the loss in z by central differences of the analytic gradient."""
    n = len(z)
    H = np.empty((n, n))
    for i in range(n):
        zp = np.array(z, dtype=np.float64)
        zm = zp.copy()
        zp[i] += eps
        zm[i] -= eps
        H[:, i] = (grad_z(net, zp, batch) - grad_z(net, zm, batch)) / (2 * eps)
    return 0.5 * (H + H.T)


def fd_mixed_partial(net: Network, theta, m, batch, eps=EPS_SECOND) -> np.ndarray:
    """d/dm of grad_theta l(m * theta) = m * grad_z, by central differences in m."""
    theta = np.asarray(theta, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    n = len(theta)
    out = np.empty((n, n))
    for i in range(n):
        mp = m.copy()
        mm = m.copy()
        mp[i] += eps
        mm[i] -= eps
        out[:, i] = (mp * grad_z(net, mp * theta, batch)
                     - mm * grad_z(net, mm * theta, batch)) / (2 * eps)
    return out


def mixed_partial_rhs(g, H, theta, m, literal=False) -> np.ndarray:
    """``diag(g) + diag(m) H diag(theta)``.

    ``literal=True`` gives ``diag(g) + diag(m) diag(theta) H``, which puts
    theta on the wrong side of H; it is kept only to measure that gap.
    """
    if literal:
        return np.diag(g) + (m * theta)[:, None] * H
    return np.diag(g) + (m[:, None] * H) * theta[None, :]


def mixed_partial_check(net: Network, theta, m, batch, eps=EPS_SECOND, literal=False) -> float:
    """Max relative error between the brute-force mixed partial and its
    closed-form expansion around ``z = m * theta``."""
    if not _smooth(net):
        raise ValueError(f"{net.arch} has ReLU layers; second differences are unreliable at kinks")
    theta = np.asarray(theta, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    z = m * theta
    lhs = fd_mixed_partial(net, theta, m, batch, eps)
    rhs = mixed_partial_rhs(grad_z(net, z, batch), fd_hessian(net, z, batch, eps), theta, m, literal)
    return rel_error(lhs, rhs, floor=1e-3 * max(np.abs(rhs).max(), 1e-12))


# ---- summary table ----------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(self.error < self.threshold)


def run_gradchecks(seed=0, draws=5) -> list:
    """The identity table printed by ``bipprune gradcheck``."""
    from .models import build_network, init_params
    from .data import make_blobs

    rng = np.random.default_rng(seed)
    net = build_network("mlp-tiny", 2, 2)
    train, _ = make_blobs(2, 40, 2, 2.0, seed=seed)
    out = []
    errs = []
    for d in range(draws):
        z = init_params(net, seed + d)
        idx = rng.choice(len(train), 16, replace=False)
        errs.append(gradient_check(net, z, train.subset(idx)))
    out.append(CheckResult("grad_z vs central FD (mlp-tiny)", max(errs), 1e-5))

    quad = make_toy("quadratic", 10, 1.0, seed)
    m = rng.uniform(0.2, 1.0, 10)
    out.append(CheckResult("exact IG vs FD of theta*(m) (quadratic)",
                           rel_frobenius(ig_exact(quad, m), ig_fd(quad, m)), 1e-5))
    gap = rel_frobenius(ig_first_order(quad, m), ig_fd(quad, m))
    out.append(CheckResult("Hessian-free IG gap (quadratic, reported)", gap, float("inf")))
    out.append(CheckResult("chain rule with exact IG vs FD of F (quadratic)",
                           rel_error(objective_grad_exact(quad, m), ig_objective_fd(quad, m)), 1e-4))
    out.append(CheckResult("first-order dF/dm gap (quadratic, reported)",
                           rel_error(objective_grad_first_order(quad, m), ig_objective_fd(quad, m)),
                           float("inf")))

    lin = make_toy("linear", 10, 1.0, seed)
    out.append(CheckResult("Hessian-free IG vs FD (linear)",
                           rel_error(ig_first_order(lin, m), ig_fd(lin, m)), 1e-6))
    out.append(CheckResult("first-order dF/dm vs FD of F (linear)",
                           rel_error(objective_grad_first_order(lin, m), ig_objective_fd(lin, m)),
                           1e-6))
    _, _, slope = ig_contribution_sweep("linear", seed=seed)
    out.append(CheckResult("IG contribution log-log slope + 1 (linear)", abs(slope + 1.0), 0.1))

    theta = init_params(net, seed)
    mask = rng.uniform(0.0, 1.0, net.n)
    batch = train.subset(rng.choice(len(train), 16, replace=False))
    out.append(CheckResult("mixed partial identity (mlp-tiny)",
                           mixed_partial_check(net, theta, mask, batch), 1e-3))
    out.append(CheckResult("mixed partial, diag(m) diag(theta) H ordering (reported)",
                           mixed_partial_check(net, theta, mask, batch, literal=True), float("inf")))
    return out


def format_table(results) -> str:
    lines = [f"{'identity':<58} {'max rel err':>12} {'threshold':>10}  status"]
    for r in results:
        thr = "report" if np.isinf(r.threshold) else f"{r.threshold:.0e}"
        status = "info" if np.isinf(r.threshold) else ("PASS" if r.passed else "FAIL")
        lines.append(f"{r.name:<58} {r.error:>12.3e} {thr:>10}  {status}")
    return "\n".join(lines)
