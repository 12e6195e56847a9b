"""Independent reference computations used by the tests."""

import math

import numpy as np


def student_t_pdf(x, df):
    c = math.gamma((df + 1) / 2) / (math.sqrt(df * math.pi) * math.gamma(df / 2))
    return c * (1 + np.asarray(x) ** 2 / df) ** (-(df + 1) / 2)


def student_t_upper_tail(t, df, n=20001):
    """P(T > t) for t > 0 by Simpson's rule after substituting x = t / u, u in (0, 1]."""
    u = np.linspace(0.0, 1.0, n)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(u > 0, student_t_pdf(t / np.where(u > 0, u, 1.0), df) * t / np.where(u > 0, u, 1.0) ** 2, 0.0)
    h = u[1] - u[0]
    return float(h / 3 * (g[0] + g[-1] + 4 * g[1:-1:2].sum() + 2 * g[2:-1:2].sum()))


def ridge_gradient_descent(X, y, alpha, tol=1e-15, max_iter=200000):
    """Minimize 0.5 |Xw - y|^2 + 0.5 alpha |w|^2 by fixed-step gradient descent."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    eig = np.linalg.eigvalsh(X.T @ X)
    step = 1.0 / (eig[-1] + alpha)
    w = np.zeros(X.shape[1])
    for _ in range(max_iter):
        g = X.T @ (X @ w - y) + alpha * w
        w = w - step * g
        if np.linalg.norm(g) < tol * max(1.0, np.linalg.norm(X.T @ y)):
            break
    return w


def pearson(x, y):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)
