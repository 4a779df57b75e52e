"""Independent reference implementations used to derive frozen test values.

Nothing here touches the package; these are slow, plain-loop algorithms.
"""
import itertools
import math

import numpy as np


def mgs_qr(a):
    """Modified Gram-Schmidt with non-negative diag(r)."""
    a = np.array(a, dtype=np.float64)
    n, k = a.shape
    q = a.copy()
    r = np.zeros((k, k))
    for j in range(k):
        r[j, j] = np.linalg.norm(q[:, j])
        q[:, j] /= r[j, j]
        for i in range(j + 1, k):
            r[j, i] = q[:, j] @ q[:, i]
            q[:, i] -= r[j, i] * q[:, j]
    return q, r


def jacobi_eigh(a, max_sweeps=100, tol=1e-14):
    """Cyclic Jacobi eigensolver for symmetric matrices; ascending eigenvalues."""
    a = np.array(a, dtype=np.float64)
    k = a.shape[0]
    v = np.eye(k)
    for _ in range(max_sweeps):
        off = math.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * max(1.0, np.linalg.norm(a)):
            break
        for p in range(k - 1):
            for q in range(p + 1, k):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1))
                c = 1 / math.sqrt(t * t + 1)
                s = t * c
                rot = np.eye(k)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    w = np.diag(a).copy()
    order = np.argsort(w)
    return w[order], v[:, order]


def polar_oracle(a):
    """Polar factors through the Jacobi eigendecomposition of a^T a."""
    a = np.asarray(a, dtype=np.float64)
    w, v = jacobi_eigh(a.T @ a)
    s = np.sqrt(w)
    return a @ v @ np.diag(1 / s) @ v.T, v @ np.diag(s) @ v.T


def inv_sqrt_oracle(a):
    w, v = jacobi_eigh(a)
    return v @ np.diag(w ** -0.5) @ v.T


def central_diff(f, x, h=1e-6):
    """Gradient of scalar f at x by central differences (x is not modified)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def principal_angles_2d_grid(b1, b2, n=20000):
    """Smallest and largest principal angle between two 2-D subspaces by grid search."""
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    circ = np.stack([np.cos(t), np.sin(t)])
    m = b2.T @ b1 @ circ                       # for each unit u in span(b1), coords of its projection
    best = np.linalg.norm(m, axis=0)           # max_v cos(u, v) = |P u|
    return math.acos(min(1.0, best.max())), math.acos(min(1.0, best.min()))


def _rot3(a, b, c):
    ca, sa, cb, sb, cc, sc = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(c), np.sin(c)
    rz1 = np.array([[ca, -sa, 0], [sa, ca, 0], [0, 0, 1]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz2 = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]])
    return rz1 @ ry @ rz2


def procrustes_grid(b1, b2, coarse=36, refine_steps=4):
    """min over O(3) of ||b1 R - b2||_F by Euler-angle grid search with local refinement."""
    best = (math.inf, None)
    grid = np.linspace(0, 2 * np.pi, coarse, endpoint=False)
    for sign in (1.0, -1.0):
        for a, b, c in itertools.product(grid, grid[: coarse // 2 + 1], grid):
            val = np.linalg.norm(b1 @ (sign * _rot3(a, b, c)) - b2)
            if val < best[0]:
                best = (val, (sign, a, b, c))
    step = 2 * np.pi / coarse
    for _ in range(refine_steps):
        sign, a0, b0, c0 = best[1]
        local = np.linspace(-step, step, 11)
        for da, db, dc in itertools.product(local, local, local):
            val = np.linalg.norm(b1 @ (sign * _rot3(a0 + da, b0 + db, c0 + dc)) - b2)
            if val < best[0]:
                best = (val, (sign, a0 + da, b0 + db, c0 + dc))
        step /= 5
    return best[0]


def givens(n, i, j, theta):
    r = np.eye(n)
    c, s = math.cos(theta), math.sin(theta)
    r[i, i] = r[j, j] = c
    r[i, j] = -s
    r[j, i] = s
    return r
