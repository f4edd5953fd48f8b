"""Regularised gridding of scattered surface heights.

The grid solves::

    min_z  sum_i (B z - h_i)^2 + smoothness * ||L z||^2

where ``B`` bilinearly interpolates node values at the data sites and ``L``
stacks the xx, yy and xy second differences of the node matrix. Second
differences are dimensionless here (no division by the spacing), so
``smoothness`` is a pure weight. A least-squares plane is removed before the
solve and added back, which makes planar data exact regardless of the
iterative tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg


class ExtrapolationError(ValueError):
    """Query outside the grid hull."""


@dataclass(frozen=True)
class HeightGrid:
    """Uniform node grid; ``z[j, i]`` is the height at ``(x_nodes[i], y_nodes[j])``."""

    x_nodes: np.ndarray
    y_nodes: np.ndarray
    z: np.ndarray
    smoothness: float = 0.01

    def __post_init__(self):
        xn = np.asarray(self.x_nodes, dtype=float)
        yn = np.asarray(self.y_nodes, dtype=float)
        z = np.asarray(self.z, dtype=float)
        for name, a in (("x_nodes", xn), ("y_nodes", yn)):
            if a.ndim != 1 or a.size < 2:
                raise ValueError(f"{name} needs at least two nodes")
            d = np.diff(a)
            if np.any(d <= 0) or np.ptp(d) > 1e-9 * (a[-1] - a[0]):
                raise ValueError(f"{name} must be uniform and increasing")
        if z.shape != (yn.size, xn.size):
            raise ValueError(f"z has shape {z.shape}, expected {(yn.size, xn.size)}")
        if not np.all(np.isfinite(z)):
            raise ValueError("z must be finite")
        object.__setattr__(self, "x_nodes", xn)
        object.__setattr__(self, "y_nodes", yn)
        object.__setattr__(self, "z", z)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return float(self.x_nodes[0]), float(self.x_nodes[-1]), float(self.y_nodes[0]), float(self.y_nodes[-1])

    # -- persistence --------------------------------------------------------
    def to_csv(self, path) -> None:
        """Node matrix, one row per y node, preceded by ``#`` axis lines."""
        fmt = lambda a: ",".join(f"{v:.12g}" for v in a)
        lines = [f"# x_nodes,{fmt(self.x_nodes)}", f"# y_nodes,{fmt(self.y_nodes)}",
                 f"# smoothness,{self.smoothness:.12g}"]
        lines += [fmt(row) for row in self.z]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "HeightGrid":
        meta, rows = {}, []
        for line in Path(path).read_text().splitlines():
            if line.startswith("#"):
                key, *vals = line[1:].strip().split(",")
                meta[key] = [float(v) for v in vals]
            elif line.strip():
                rows.append([float(v) for v in line.split(",")])
        try:
            return cls(np.array(meta["x_nodes"]), np.array(meta["y_nodes"]), np.array(rows),
                       meta.get("smoothness", [0.01])[0])
        except KeyError as exc:
            raise ValueError(f"{path}: missing axis line {exc.args[0]}") from None


def grid_axes(bounds, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    """Uniform axes covering ``bounds`` with at most ``spacing`` between nodes."""
    x0, x1, y0, y1 = bounds
    nx = max(2, int(math.ceil((x1 - x0) / spacing - 1e-9)) + 1)
    ny = max(2, int(math.ceil((y1 - y0) / spacing - 1e-9)) + 1)
    return np.linspace(x0, x1, nx), np.linspace(y0, y1, ny)


def _locate(nodes: np.ndarray, q: np.ndarray):
    h = nodes[1] - nodes[0]
    u = (q - nodes[0]) / h
    i = np.clip(np.floor(u).astype(int), 0, nodes.size - 2)
    return i, u - i, h


def _check_hull(g: HeightGrid, x, y, tol: float = 1e-12):
    x0, x1, y0, y1 = g.bounds
    span = max(x1 - x0, y1 - y0) * tol
    if np.any((x < x0 - span) | (x > x1 + span) | (y < y0 - span) | (y > y1 + span)):
        raise ExtrapolationError(f"query outside grid hull {g.bounds}")


def _interp_matrix(xn, yn, x, y) -> sp.csr_matrix:
    i, fx, _ = _locate(xn, x)
    j, fy, _ = _locate(yn, y)
    nx = xn.size
    rows = np.repeat(np.arange(x.size), 4)
    cols = np.column_stack([j * nx + i, j * nx + i + 1, (j + 1) * nx + i, (j + 1) * nx + i + 1]).ravel()
    w = np.column_stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]).ravel()
    return sp.csr_matrix((w, (rows, cols)), shape=(x.size, nx * yn.size))


def _second_difference(nx: int, ny: int) -> sp.csr_matrix:
    def d2(n):
        return sp.diags([1.0, -2.0, 1.0], [0, 1, 2], shape=(max(n - 2, 0), n))

    def d1(n):
        return sp.diags([-1.0, 1.0], [0, 1], shape=(n - 1, n))

    ix, iy = sp.identity(nx), sp.identity(ny)
    blocks = []
    if nx > 2:
        blocks.append(sp.kron(iy, d2(nx)))
    if ny > 2:
        blocks.append(sp.kron(d2(ny), ix))
    blocks.append(sp.kron(d1(ny), d1(nx)))
    return sp.vstack(blocks).tocsr()


def _plane(x, y, z):
    xc, yc = x.mean(), y.mean()
    M = np.column_stack([np.ones_like(x), x - xc, y - yc])
    coef, *_ = np.linalg.lstsq(M, z, rcond=None)
    return lambda a, b: coef[0] + coef[1] * (a - xc) + coef[2] * (b - yc)


def fit_grid(points, x_nodes, y_nodes, smoothness: float = 0.01, tol: float = 1e-10) -> HeightGrid:
    """Regularised least-squares height grid from scattered ``(x, y, z)`` points.

    Parameters
    ----------
    points : array_like, shape (n, 3)
    x_nodes, y_nodes : array_like
        Uniform, increasing axes; every point must lie inside their hull.
    smoothness : float
        Weight of the second-difference penalty, > 0.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("empty point set")
    if not smoothness > 0:
        raise ValueError("smoothness must be > 0")
    xn, yn = np.asarray(x_nodes, dtype=float), np.asarray(y_nodes, dtype=float)
    shell = HeightGrid(xn, yn, np.zeros((yn.size, xn.size)), smoothness)
    x, y, z = pts.T
    _check_hull(shell, x, y, tol=1e-9)

    plane = _plane(x, y, z)
    r = z - plane(x, y)
    B = _interp_matrix(xn, yn, x, y)
    L = _second_difference(xn.size, yn.size)
    M = (B.T @ B + smoothness * (L.T @ L)).tocsr()
    rhs = B.T @ r
    n = M.shape[0]
    if np.linalg.norm(rhs) == 0:
        w = np.zeros(n)
    else:
        diag = M.diagonal()
        inv = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)
        pre = LinearOperator((n, n), matvec=lambda v: inv * v)
        w, info = cg(M, rhs, rtol=tol, atol=0.0, maxiter=10 * n, M=pre)
        if info < 0:
            raise RuntimeError(f"conjugate gradient breakdown ({info})")
    X, Y = np.meshgrid(xn, yn)
    zg = plane(X, Y) + w.reshape(yn.size, xn.size)
    return HeightGrid(xn, yn, zg, smoothness)


def roughness(g: HeightGrid) -> float:
    """Value of the second-difference penalty ``||L z||^2`` at the fitted grid."""
    L = _second_difference(g.x_nodes.size, g.y_nodes.size)
    return float(np.sum((L @ g.z.ravel()) ** 2))


def grid_height(g: HeightGrid, x, y):
    """Bilinear height; raises ``ExtrapolationError`` outside the hull."""
    xa, ya = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    _check_hull(g, xa, ya)
    i, fx, _ = _locate(g.x_nodes, xa)
    j, fy, _ = _locate(g.y_nodes, ya)
    z = g.z
    h = (z[j, i] * (1 - fx) * (1 - fy) + z[j, i + 1] * fx * (1 - fy)
         + z[j + 1, i] * (1 - fx) * fy + z[j + 1, i + 1] * fx * fy)
    return h if np.ndim(h) else float(h)


def grid_gradient(g: HeightGrid, x, y):
    """Derivative of the bilinear interpolant: cell differences blended across the cell."""
    xa, ya = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    _check_hull(g, xa, ya)
    i, fx, hx = _locate(g.x_nodes, xa)
    j, fy, hy = _locate(g.y_nodes, ya)
    z = g.z
    dzdx = ((z[j, i + 1] - z[j, i]) * (1 - fy) + (z[j + 1, i + 1] - z[j + 1, i]) * fy) / hx
    dzdy = ((z[j + 1, i] - z[j, i]) * (1 - fx) + (z[j + 1, i + 1] - z[j, i + 1]) * fx) / hy
    if np.ndim(dzdx):
        return dzdx, dzdy
    return float(dzdx), float(dzdy)
