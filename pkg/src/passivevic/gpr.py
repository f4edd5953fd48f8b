"""Gaussian-process regression over the scan plane and the viscoelastic body map.

Kernel: squared exponential with one length scale per axis,
``k(p, q) = sf2 * exp(-0.5 * ((px-qx)^2/lx^2 + (py-qy)^2/ly^2))``,
with a constant prior mean equal to the mean of the training targets.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .surface import HeightGrid, fit_grid, grid_axes, grid_gradient, grid_height

MAP_FORMAT = 1
FAR_DISTANCE = 3.0
_JITTERS = (0.0,) + tuple(10.0**e for e in range(-12, -5))


@dataclass(frozen=True)
class Hyperparams:
    sigma_f2: float
    length_x: float
    length_y: float
    sigma_n2: float

    def __post_init__(self):
        if not all(v > 0 for v in (self.sigma_f2, self.length_x, self.length_y, self.sigma_n2)):
            raise ValueError(f"hyperparameters must be strictly positive: {self}")


@dataclass(frozen=True, eq=False)
class GprModel:
    """Fitted GP: training data, hyperparameters and the Cholesky factor."""

    inputs: np.ndarray
    targets: np.ndarray
    hyper: Hyperparams
    prior_mean: float
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float
    log_marginal_likelihood: float

    def predict(self, x, y, return_far: bool = False):
        return gpr_predict(self, x, y, return_far)


def se_kernel(A: np.ndarray, B: np.ndarray, hp: Hyperparams) -> np.ndarray:
    dx = (A[:, None, 0] - B[None, :, 0]) / hp.length_x
    dy = (A[:, None, 1] - B[None, :, 1]) / hp.length_y
    return hp.sigma_f2 * np.exp(-0.5 * (dx * dx + dy * dy))


def _factor(X: np.ndarray, hp: Hyperparams):
    K = se_kernel(X, X, hp)
    n = X.shape[0]
    for j in _JITTERS:
        try:
            L = np.linalg.cholesky(K + (hp.sigma_n2 + j * hp.sigma_f2) * np.eye(n))
            return L, j
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError("kernel matrix not positive definite after jitter escalation")


def _lml(X, r, hp) -> float:
    try:
        L, _ = _factor(X, hp)
    except np.linalg.LinAlgError:
        return -math.inf
    a = cho_solve((L, True), r)
    return float(-0.5 * r @ a - np.log(np.diag(L)).sum() - 0.5 * r.size * math.log(2 * math.pi))


def typical_spacing(X: np.ndarray) -> float:
    """Median nearest-neighbour distance of the training inputs."""
    if X.shape[0] < 2:
        return 1.0
    d = np.sqrt(((X[:, None, :] - X[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    return float(np.median(d.min(axis=1)))


def default_hyperparams(inputs, targets, spacing: float | None = None) -> Hyperparams:
    """``l = 2 * spacing``, ``sf2 = var(targets)``, ``sn2 = 1% of sf2``."""
    X = np.asarray(inputs, dtype=float).reshape(-1, 2)
    y = np.asarray(targets, dtype=float)
    h = typical_spacing(X) if spacing is None else spacing
    sf2 = float(np.var(y))
    if sf2 <= 0:
        sf2 = 1e-12 * max(1.0, float(np.mean(y)) ** 2)
    return Hyperparams(sf2, 2 * h, 2 * h, 0.01 * sf2)


def optimise_hyperparams(X: np.ndarray, y: np.ndarray, spacing: float | None = None, n_polish: int = 3) -> Hyperparams:
    """Maximise the log marginal likelihood: log-grid of starts, Nelder-Mead polish."""
    base = default_hyperparams(X, y, spacing)
    h = base.length_x / 2
    r = y - y.mean()
    var = base.sigma_f2
    span = float(max(np.ptp(X[:, 0]), np.ptp(X[:, 1]), h))
    lo = np.log([0.25 * h, 0.25 * h, 1e-3 * var, 1e-8 * var])
    hi = np.log([20 * span, 20 * span, 1e3 * var, var])

    def unpack(th):
        th = np.clip(th, lo, hi)
        e = np.exp(th)
        return Hyperparams(float(e[2]), float(e[0]), float(e[1]), float(e[3]))

    def nll(th):
        v = -_lml(X, r, unpack(th))
        return v if math.isfinite(v) else 1e300

    starts = []
    for lx in (0.5, 1, 2, 4, 8):
        for ly in (0.5, 1, 2, 4, 8):
            for nr in (1e-4, 1e-2):
                th = np.log([lx * h, ly * h, var, nr * var])
                starts.append((nll(th), tuple(th)))
    starts.sort()
    best_v, best_th = starts[0][0], np.array(starts[0][1])
    for _, th0 in starts[:n_polish]:
        res = minimize(nll, np.array(th0), method="Nelder-Mead", bounds=list(zip(lo, hi)),
                       options={"xatol": 1e-4, "fatol": 1e-8, "maxiter": 800})
        if res.fun < best_v:
            best_v, best_th = res.fun, res.x
    return unpack(best_th)


def gpr_fit(inputs, targets, hyperparams: Hyperparams | str | None = None, spacing: float | None = None) -> GprModel:
    """Fit an exact GP.

    Parameters
    ----------
    inputs : array_like, shape (n, 2)
    targets : array_like, shape (n,)
    hyperparams : Hyperparams, "auto" or None
        ``None`` uses :func:`default_hyperparams`; ``"auto"`` maximises the
        log marginal likelihood.
    """
    X = np.asarray(inputs, dtype=float).reshape(-1, 2)
    y = np.asarray(targets, dtype=float).ravel()
    if X.shape[0] == 0 or X.shape[0] != y.size:
        raise ValueError("need at least one training point with matching targets")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("training data must be finite")
    if hyperparams is None:
        hp = default_hyperparams(X, y, spacing)
    elif isinstance(hyperparams, str):
        if hyperparams != "auto":
            raise ValueError(f"unknown hyperparameter mode {hyperparams!r}")
        hp = optimise_hyperparams(X, y, spacing) if X.shape[0] > 2 else default_hyperparams(X, y, spacing)
    else:
        hp = hyperparams
    mu = float(y.mean())
    L, jitter = _factor(X, hp)
    alpha = cho_solve((L, True), y - mu)
    r = y - mu
    lml = float(-0.5 * r @ alpha - np.log(np.diag(L)).sum() - 0.5 * r.size * math.log(2 * math.pi))
    return GprModel(X, y, hp, mu, L, alpha, jitter, lml)


def gpr_predict(m: GprModel, x, y, return_far: bool = False):
    """Posterior mean and latent variance at ``(x, y)``.

    Points farther than three scaled length scales from every training input
    get the prior ``(mean, sigma_f2)`` and ``far = True``.
    """
    xa, ya = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    scalar = xa.ndim == 0 and ya.ndim == 0
    P = np.column_stack([np.ravel(xa), np.ravel(ya)])
    hp = m.hyper
    Ks = se_kernel(P, m.inputs, hp)
    mean = m.prior_mean + Ks @ m.alpha
    v = solve_triangular(m.chol, Ks.T, lower=True)
    var = np.clip(hp.sigma_f2 - (v * v).sum(axis=0), 0.0, hp.sigma_f2)
    dx = (P[:, None, 0] - m.inputs[None, :, 0]) / hp.length_x
    dy = (P[:, None, 1] - m.inputs[None, :, 1]) / hp.length_y
    far = np.sqrt((dx * dx + dy * dy).min(axis=1)) > FAR_DISTANCE
    mean = np.where(far, m.prior_mean, mean)
    var = np.where(far, hp.sigma_f2, var)
    if scalar:
        out = (float(mean[0]), float(var[0]), bool(far[0]))
    else:
        shape = np.broadcast(xa, ya).shape
        out = (mean.reshape(shape), var.reshape(shape), far.reshape(shape))
    return out if return_far else out[:2]


def gpr_mean(m: GprModel, x: float, y: float) -> float:
    """Scalar posterior mean only (same far-field rule as :func:`gpr_predict`)."""
    hp = m.hyper
    dx = (x - m.inputs[:, 0]) / hp.length_x
    dy = (y - m.inputs[:, 1]) / hp.length_y
    d2 = dx * dx + dy * dy
    if d2.min() > FAR_DISTANCE**2:
        return m.prior_mean
    return float(m.prior_mean + hp.sigma_f2 * (np.exp(-0.5 * d2) @ m.alpha))


def _model_dict(m: GprModel) -> dict:
    return {"hyperparams": asdict(m.hyper), "inputs": m.inputs.tolist(), "targets": m.targets.tolist()}


def _model_from_dict(d: dict) -> GprModel:
    return gpr_fit(d["inputs"], d["targets"], Hyperparams(**d["hyperparams"]))


@dataclass(frozen=True, eq=False)
class BodyMap:
    """Fitted surface grid plus GP maps of kappa and lambda."""

    grid: HeightGrid
    kappa_gpr: GprModel
    lambda_gpr: GprModel
    beta: float

    def height(self, x, y):
        return grid_height(self.grid, x, y)

    def gradient(self, x, y):
        return grid_gradient(self.grid, x, y)

    def kappa(self, x, y):
        return gpr_predict(self.kappa_gpr, x, y)[0]

    def lambda_(self, x, y):
        return gpr_predict(self.lambda_gpr, x, y)[0]

    def covers(self, x, y) -> bool:
        x0, x1, y0, y1 = self.grid.bounds
        return bool(np.all((x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)))

    def save(self, path, grid_path=None) -> None:
        """JSON document plus the grid CSV it references (relative path)."""
        path = Path(path)
        grid_path = Path(grid_path) if grid_path else path.with_name(path.stem + "_grid.csv")
        self.grid.to_csv(grid_path)
        try:
            ref = str(grid_path.resolve().relative_to(path.parent.resolve()))
        except ValueError:
            ref = str(grid_path.resolve())
        doc = {"format": MAP_FORMAT, "beta": self.beta, "grid_file": ref,
               "kappa": _model_dict(self.kappa_gpr), "lambda": _model_dict(self.lambda_gpr)}
        path.write_text(json.dumps(doc, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "BodyMap":
        path = Path(path)
        doc = json.loads(path.read_text())
        if doc.get("format") != MAP_FORMAT:
            raise ValueError(f"format: expected {MAP_FORMAT}, got {doc.get('format')!r}")
        try:
            grid = HeightGrid.from_csv(path.parent / doc["grid_file"])
            return cls(grid, _model_from_dict(doc["kappa"]), _model_from_dict(doc["lambda"]), float(doc["beta"]))
        except KeyError as exc:
            raise ValueError(f"{exc.args[0]}: missing from body map") from None


def build_body_map(
    survey: Sequence,
    grid_spacing: float = 0.005,
    smoothness: float = 0.01,
    bounds: tuple[float, float, float, float] | None = None,
    hyperparams: Hyperparams | str | None = "auto",
    beta: float | None = None,
) -> BodyMap:
    """Fit the height grid and the two GPs from usable survey nodes.

    ``bounds`` defaults to the hull of the survey nodes grown by half the
    node spacing, which for a centred survey is the full workspace.
    """
    good = [e for e in survey if e.ok]
    if not good:
        raise ValueError("no usable survey nodes (all flagged)")
    X = np.array([(e.x, e.y) for e in good])
    if bounds is None:
        if len(good) < 2:
            raise ValueError("bounds are required for a single-node survey")
        half = 0.5 * typical_spacing(X)
        bounds = (X[:, 0].min() - half, X[:, 0].max() + half, X[:, 1].min() - half, X[:, 1].max() + half)
    xn, yn = grid_axes(bounds, grid_spacing)
    grid = fit_grid([(e.x, e.y, e.surface_z) for e in good], xn, yn, smoothness)
    kap = gpr_fit(X, [e.fit.params.kappa for e in good], hyperparams)
    lam = gpr_fit(X, [e.fit.params.lambda_ for e in good], hyperparams)
    b = good[0].fit.params.beta if beta is None else beta
    return BodyMap(grid, kap, lam, b)
