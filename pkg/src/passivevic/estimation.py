"""Palpation simulation and Hunt-Crossley identification at fixed beta.

The identification is linear in ``(kappa, lambda)`` once ``beta`` is fixed::

    F_sensor + m_I * zdd = kappa * eps^beta + lambda * (-zd) * eps^beta

with ``eps = surface_z - z_ee``. The relative residual reported everywhere is
``||r||_2 / sqrt(n)`` in newtons.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import PalpationRecord, Phantom, ViscoelasticParams, hunt_crossley

CONTACT_THRESHOLD = 0.1
SURVEY_COLUMNS = ("x", "y", "s", "kappa", "lambda", "residual", "flag")


@dataclass(frozen=True)
class PalpationProtocol:
    """Sinusoidal vertical palpation about a fixed mean penetration.

    Attributes
    ----------
    amplitude : float
        Peak vertical excursion (m).
    frequency : float
        Hz.
    duration : float
        s.
    sample_rate : float
        Hz.
    contact_bias : float
        Mean penetration (m); must exceed ``amplitude`` so contact is never lost.
    noise_sigma : float
        Standard deviation of the additive force-sensor noise (N).
    """

    amplitude: float = 0.005
    frequency: float = 1.0
    duration: float = 5.0
    sample_rate: float = 500.0
    contact_bias: float = 0.008
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.amplitude < 0 or self.frequency <= 0 or self.sample_rate <= 0:
            raise ValueError("amplitude must be >= 0; frequency and sample_rate > 0")
        if not self.contact_bias > self.amplitude:
            raise ValueError(
                f"contact_bias ({self.contact_bias}) must exceed amplitude ({self.amplitude})"
            )
        if self.n_samples < 10:
            raise ValueError("duration * sample_rate must give at least 10 samples")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))


@dataclass(frozen=True)
class FitResult:
    """Outcome of one linear least-squares identification.

    ``coef`` holds the raw minimiser; ``params`` is the same point projected
    onto the admissible set (non-negative coefficients), which only differs
    for badly misspecified fits.
    """

    params: ViscoelasticParams
    residual: float
    n_samples: int
    condition_estimate: float
    lambda_identifiable: bool = True
    model: str = "hc"
    coef: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class PointEstimate:
    x: float
    y: float
    surface_z: float
    fit: FitResult | None
    flag: str = "ok"

    @property
    def ok(self) -> bool:
        return self.fit is not None and self.flag in ("ok", "lambda_unidentifiable")


# ---------------------------------------------------------------- generation
def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def generate_palpation(
    ph: Phantom,
    x: float,
    y: float,
    proto: PalpationProtocol = PalpationProtocol(),
    seed=0,
    surface_z: float | None = None,
) -> PalpationRecord:
    """Simulate a sinusoidal palpation at ``(x, y)``.

    The probe oscillates as ``surface_z - bias + A cos(2 pi f t)``; ``surface_z``
    defaults to the true surface height. Kinematics are analytic. Forces come
    from the ground-truth phantom, minus the indenter inertia, plus noise.

    Raises
    ------
    ValueError
        If the commanded motion leaves contact with the true surface.
    """
    pt = ph.point(x, y)
    s_ref = pt.s if surface_z is None else surface_z
    n = proto.n_samples
    t = np.arange(n) / proto.sample_rate
    w = 2.0 * np.pi * proto.frequency
    z = s_ref - proto.contact_bias + proto.amplitude * np.cos(w * t)
    zd = -proto.amplitude * w * np.sin(w * t)
    zdd = -proto.amplitude * w * w * np.cos(w * t)
    eps = pt.s - z
    if eps.min() <= 0:
        raise ValueError(f"palpation at ({x:.4g}, {y:.4g}) leaves contact (min eps {eps.min():.3g} m)")
    f_tissue = hunt_crossley(pt.kappa, pt.lambda_, ph.beta, eps, -zd)
    f = f_tissue - ph.indenter_mass * zdd
    if proto.noise_sigma > 0:
        f = f + _rng(seed).normal(0.0, proto.noise_sigma, n)
    return PalpationRecord(t, np.full(n, x), np.full(n, y), z, zd, zdd, f)


def generate_load_unload(
    params: ViscoelasticParams,
    m_I: float = 0.2,
    noise_sigma: float = 0.0,
    seed=0,
    sample_rate: float = 500.0,
    load_speed: float = 0.03,
    load_time: float = 0.75,
    hold_time: float = 10.0,
    unload_speed: float = 0.015,
    unload_time: float = 1.5,
    surface_z: float = 0.0,
) -> PalpationRecord:
    """Constant-velocity load, hold, constant-velocity unload from the surface.

    Velocity is piecewise constant so the sampled acceleration is zero.
    """
    t_end = load_time + hold_time + unload_time
    t = np.arange(int(round(t_end * sample_rate)) + 1) / sample_rate
    t1, t2 = load_time, load_time + hold_time
    depth = load_speed * load_time
    eps = np.where(t < t1, load_speed * t, np.where(t < t2, depth, depth - unload_speed * (t - t2)))
    eps_dot = np.where(t < t1, load_speed, np.where(t < t2, 0.0, -unload_speed))
    eps = np.maximum(eps, 0.0)
    eps[0] = eps[-1] = 0.0
    z = surface_z - eps
    zd = -eps_dot
    zdd = np.zeros_like(t)
    f = hunt_crossley(params.kappa, params.lambda_, params.beta, eps, eps_dot)
    if noise_sigma > 0:
        f = f + _rng(seed).normal(0.0, noise_sigma, t.size)
    n = t.size
    return PalpationRecord(t, np.zeros(n), np.zeros(n), z, zd, zdd, f)


# ------------------------------------------------------------------- fitting
def _as_record(samples) -> PalpationRecord:
    if isinstance(samples, PalpationRecord):
        return samples
    return PalpationRecord.from_samples(list(samples))


def _linear_fit(X: np.ndarray, yv: np.ndarray, beta: float, model: str) -> FitResult:
    n = yv.size
    norms = np.linalg.norm(X, axis=0)
    coef = np.zeros(2)
    lambda_ok = bool(norms[1] > 0)
    cond = math.inf
    if norms[0] > 0:
        if lambda_ok:
            Xs = X / norms
            G = Xs.T @ Xs
            cond = float(np.linalg.cond(G))
            lambda_ok = cond < 1e12
        if lambda_ok:
            coef = np.linalg.solve(G, Xs.T @ yv) / norms
        else:
            coef[0] = float(X[:, 0] @ yv) / norms[0] ** 2
            cond = math.inf
    r = yv - X @ coef
    params = ViscoelasticParams(max(coef[0], 0.0), max(coef[1], 0.0), beta)
    return FitResult(
        params=params,
        residual=float(np.linalg.norm(r) / math.sqrt(n)),
        n_samples=n,
        condition_estimate=cond,
        lambda_identifiable=lambda_ok,
        model=model,
        coef=(float(coef[0]), float(coef[1])),
    )


def fit_hc(samples, surface_z: float, beta: float = 1.35, m_I: float = 0.2) -> FitResult:
    """Least-squares Hunt-Crossley fit at fixed ``beta``.

    Raises
    ------
    ValueError
        If fewer than two samples are in contact.
    """
    if not 1.0 <= beta <= 1.5:
        raise ValueError(f"beta must lie in [1.0, 1.5], got {beta}")
    rec = _as_record(samples)
    eps = surface_z - rec.z_ee
    contact = eps > 0
    if contact.sum() < 2:
        raise ValueError("need at least two samples in contact")
    eb = np.where(contact, np.maximum(eps, 0.0) ** beta, 0.0)
    X = np.column_stack([eb, -rec.zd_ee * eb])
    return _linear_fit(X, rec.f_sensor + m_I * rec.zdd_ee, beta, "hc")


def fit_kv(samples, surface_z: float, m_I: float = 0.2) -> FitResult:
    """Kelvin-Voigt fit: regressors ``eps`` and ``-zd`` restricted to contact.

    ``params.kappa`` holds the spring constant and ``params.lambda_`` the damper.
    """
    rec = _as_record(samples)
    eps = surface_z - rec.z_ee
    contact = eps > 0
    if contact.sum() < 2:
        raise ValueError("need at least two samples in contact")
    X = np.column_stack([np.where(contact, eps, 0.0), np.where(contact, -rec.zd_ee, 0.0)])
    return _linear_fit(X, rec.f_sensor + m_I * rec.zdd_ee, 1.0, "kv")


def beta_sweep(samples, surface_z: float, m_I: float, betas: Sequence[float]) -> list[tuple[float, FitResult]]:
    """One HC fit per beta; the caller picks the minimum residual."""
    if len(betas) == 0:
        raise ValueError("betas must be non-empty")
    rec = _as_record(samples)
    return [(float(b), fit_hc(rec, surface_z, b, m_I)) for b in betas]


def best_beta(sweep: list[tuple[float, FitResult]]) -> float:
    return min(sweep, key=lambda bf: bf[1].residual)[0]


def residual_vs_duration(
    ph: Phantom,
    x: float,
    y: float,
    proto: PalpationProtocol,
    durations: Sequence[float],
    seed=0,
    validation_duration: float = 5.0,
) -> list[tuple[float, float]]:
    """Prediction residual of fits identified from palpations of growing length.

    Each duration is fitted on its own noisy record. The residual is then
    evaluated on a common validation record of ``validation_duration`` whose
    noise stream is independent of the training noise, so differences between
    durations reflect only the quality of the identified parameters.
    """
    if any(b <= a for a, b in zip(durations, durations[1:])):
        raise ValueError("durations must be strictly increasing")
    ss = np.random.SeedSequence(seed)
    train_seq, val_seq = ss.spawn(2)
    val = generate_palpation(ph, x, y, replace(proto, duration=validation_duration), np.random.default_rng(val_seq))
    s = ph.point(x, y).s
    eps = s - val.z_ee
    yv = val.f_sensor + ph.indenter_mass * val.zdd_ee
    out = []
    for d, child in zip(durations, train_seq.spawn(len(durations))):
        rec = generate_palpation(ph, x, y, replace(proto, duration=d), np.random.default_rng(child))
        fit = fit_hc(rec, s, ph.beta, ph.indenter_mass)
        k, lam = fit.coef
        pred = hunt_crossley(k, lam, ph.beta, eps, -val.zd_ee)
        out.append((float(d), float(np.linalg.norm(yv - pred) / math.sqrt(yv.size))))
    return out


def estimate_spread(
    ph: Phantom, x: float, y: float, proto: PalpationProtocol, durations: Sequence[float], seeds: Sequence[int]
) -> list[tuple[float, float, float]]:
    """Across-seed standard deviation of ``(kappa, lambda)`` per duration."""
    s = ph.point(x, y).s
    out = []
    for d in durations:
        p = replace(proto, duration=d)
        est = np.array([fit_hc(generate_palpation(ph, x, y, p, sd), s, ph.beta, ph.indenter_mass).coef for sd in seeds])
        out.append((float(d), float(est[:, 0].std(ddof=1)), float(est[:, 1].std(ddof=1))))
    return out


def mass_bias(ph: Phantom, x: float, y: float, proto: PalpationProtocol, delta_m: float) -> tuple[float, float]:
    """Relative ``(kappa, lambda)`` bias when the indenter mass is off by ``delta_m``.

    Diagnostic only: noiseless data at the true mass, fitted with ``m_I + delta_m``.
    """
    pt = ph.point(x, y)
    rec = generate_palpation(ph, x, y, replace(proto, noise_sigma=0.0))
    fit = fit_hc(rec, pt.s, ph.beta, ph.indenter_mass + delta_m)
    return fit.coef[0] / pt.kappa - 1.0, fit.coef[1] / pt.lambda_ - 1.0


# ------------------------------------------------------------------- survey
def detect_surface(
    ph: Phantom,
    x: float,
    y: float,
    seed=0,
    threshold: float = CONTACT_THRESHOLD,
    speed: float = 0.002,
    start_height: float = 0.003,
    travel: float = 0.012,
    sample_rate: float = 500.0,
    noise_sigma: float = 0.0,
    window: int = 25,
) -> float | None:
    """Contact-onset height from a slow constant-velocity approach.

    Returns the probe height where the moving average of the sensed force
    first reaches ``threshold`` (window-centred), or ``None`` if it never does.
    """
    pt = ph.point(x, y)
    n = int(travel / speed * sample_rate)
    t = np.arange(n) / sample_rate
    z = pt.s + start_height - speed * t
    f = hunt_crossley(pt.kappa, pt.lambda_, ph.beta, pt.s - z, speed)
    if noise_sigma > 0:
        f = f + _rng(seed).normal(0.0, noise_sigma, n)
    w = max(1, min(window, n))
    ma = np.convolve(f, np.ones(w) / w, mode="valid")
    hits = np.flatnonzero(ma >= threshold)
    if hits.size == 0:
        return None
    return float(z[hits[0] + (w - 1) // 2])


def onset_offset(params: ViscoelasticParams, threshold: float = CONTACT_THRESHOLD, speed: float = 0.002) -> float:
    """Penetration at which an approach at ``speed`` first senses ``threshold``."""
    k = params.kappa + params.lambda_ * speed
    return (threshold / k) ** (1.0 / params.beta) if k > 0 else 0.0


def survey_nodes(bounds, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    """Centred node coordinates per axis, ``max(1, floor(width/spacing))`` each."""
    if not spacing > 0:
        raise ValueError("spacing must be > 0")
    x0, x1, y0, y1 = bounds

    def axis(a, b):
        n = max(1, int(math.floor((b - a) / spacing + 1e-9)))
        first = a + 0.5 * ((b - a) - (n - 1) * spacing)
        return first + spacing * np.arange(n)

    return axis(x0, x1), axis(y0, y1)


def palpate_point(
    ph: Phantom,
    x: float,
    y: float,
    proto: PalpationProtocol,
    seed=0,
    beta: float | None = None,
    m_I: float | None = None,
    threshold: float = CONTACT_THRESHOLD,
    refine: int = 3,
) -> tuple[PointEstimate, PalpationRecord | None]:
    """Approach, palpate and identify one node.

    The contact-onset height sits below the true surface by the penetration
    that produces ``threshold``; it is corrected with the current parameter
    estimate and the fit repeated ``refine`` times.
    """
    beta = ph.beta if beta is None else beta
    m_I = ph.indenter_mass if m_I is None else m_I
    s_approach, s_palp = np.random.SeedSequence(seed).spawn(2) if not isinstance(seed, np.random.SeedSequence) else seed.spawn(2)
    z_on = detect_surface(ph, x, y, np.random.default_rng(s_approach), threshold, noise_sigma=proto.noise_sigma)
    if z_on is None:
        return PointEstimate(x, y, math.nan, None, "no_contact"), None
    try:
        rec = generate_palpation(ph, x, y, proto, np.random.default_rng(s_palp), surface_z=z_on)
        s_hat = z_on
        fit = fit_hc(rec, s_hat, beta, m_I)
        for _ in range(refine):
            s_hat = z_on + onset_offset(fit.params, threshold)
            fit = fit_hc(rec, s_hat, beta, m_I)
    except ValueError as exc:
        return PointEstimate(x, y, z_on, None, f"failed: {exc}"), None
    flag = "ok" if fit.lambda_identifiable else "lambda_unidentifiable"
    return PointEstimate(x, y, s_hat, fit, flag), rec


def survey_grid(
    ph: Phantom,
    spacing: float,
    proto: PalpationProtocol = PalpationProtocol(),
    seed=0,
    beta: float | None = None,
    m_I: float | None = None,
    workers: int | None = None,
    keep_records: bool = False,
):
    """Palpate every node of a centred grid; failed nodes are flagged.

    Returns a list of ``PointEstimate`` in row-major (y outer) order, or
    ``(estimates, records)`` when ``keep_records`` is set.
    """
    xs, ys = survey_nodes(ph.bounds, spacing)
    nodes = [(float(x), float(y)) for y in ys for x in xs]
    seeds = np.random.SeedSequence(seed).spawn(len(nodes))

    def one(i):
        return palpate_point(ph, *nodes[i], proto, seeds[i], beta, m_I)

    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, range(len(nodes))))
    else:
        results = [one(i) for i in range(len(nodes))]
    estimates = [r[0] for r in results]
    if keep_records:
        return estimates, [r[1] for r in results]
    return estimates


def save_survey(estimates: Sequence[PointEstimate], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SURVEY_COLUMNS)
        for e in estimates:
            k, lam, res = (e.fit.params.kappa, e.fit.params.lambda_, e.fit.residual) if e.fit else (math.nan,) * 3
            w.writerow([f"{v:.12g}" for v in (e.x, e.y, e.surface_z, k, lam, res)] + [e.flag])


def load_survey(path, beta: float = 1.35) -> list[PointEstimate]:
    out = []
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if tuple(header or ()) != SURVEY_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(SURVEY_COLUMNS)}")
        for row in rows:
            x, y, s, k, lam, res = (float(v) for v in row[:6])
            flag = row[6]
            fit = None
            if not math.isnan(k):
                fit = FitResult(ViscoelasticParams(k, lam, beta), res, 0, math.nan, flag != "lambda_unidentifiable",
                                coef=(k, lam))
            out.append(PointEstimate(x, y, s, fit, flag))
    return out
