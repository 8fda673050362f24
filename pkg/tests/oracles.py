"""Reference computations kept independent of the package code paths."""
import math

import numpy as np


def jacobi_singular_values(a, sweeps=60, tol=1e-15):
    """One-sided Jacobi SVD; returns singular values in descending order."""
    u = np.array(a, dtype=np.float64, copy=True)
    if u.shape[0] < u.shape[1]:
        u = u.T.copy()
    n = u.shape[1]
    for _ in range(sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = float(u[:, p] @ u[:, p])
                beta = float(u[:, q] @ u[:, q])
                gamma = float(u[:, p] @ u[:, q])
                if abs(gamma) <= tol * math.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                up = u[:, p].copy()
                u[:, p] = c * up - s * u[:, q]
                u[:, q] = s * up + c * u[:, q]
        if not rotated:
            break
    return np.sort(np.linalg.norm(u, axis=0))[::-1]


def svd_residual(a):
    """sqrt(sum_{i>=2} sigma_i^2): the optimal rank-1 residual."""
    s = jacobi_singular_values(a)
    return float(math.sqrt(sum(x * x for x in s[1:])))


def rel_err(got, want, floor=1e-300):
    return abs(got - want) / max(abs(want), floor)


def numeric_grads(f, params, h=1e-5):
    """Central differences of scalar f() w.r.t. each array in params (perturbed in place)."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            fp = f()
            p[idx] = old - h
            fm = f()
            p[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def max_rel_grad_err(analytic, numeric):
    """max |a - n| / max(|a| + |n|, 1e-8) over all entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def cross_entropy_scalar(pred, labels):
    total = 0.0
    for row, y in zip(pred.tolist(), labels.tolist()):
        total -= math.log(max(row[y], 1e-12))
    return total / len(labels)


def mse_scalar(pred, target):
    total = 0.0
    for prow, trow in zip(pred.tolist(), target.tolist()):
        for a, b in zip(prow, trow):
            total += (a - b) ** 2
    return total / len(pred)
