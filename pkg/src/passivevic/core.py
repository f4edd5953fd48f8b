"""Contact force laws, domain types and the synthetic viscoelastic phantom.

Sign conventions used throughout the package:

* ``z`` points up. The penetration ``eps = s - z`` is positive when the
  probe tip is below the undeformed tissue surface ``s``.
* Tissue forces are returned as the (non-negative) upward reaction on the
  probe.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

PHANTOM_FORMAT = 1


class WorkspaceError(ValueError):
    """A query fell outside the phantom workspace."""


@dataclass(frozen=True)
class ViscoelasticParams:
    """Hunt-Crossley material point.

    Units: ``kappa`` in N/m^beta, ``lambda_`` in N s/m^(beta+1).
    """

    kappa: float
    lambda_: float
    beta: float = 1.35

    def __post_init__(self):
        if not (self.kappa >= 0 and self.lambda_ >= 0):
            raise ValueError(f"kappa and lambda must be >= 0, got {self.kappa}, {self.lambda_}")
        if not 1.0 <= self.beta <= 1.5:
            raise ValueError(f"beta must lie in [1.0, 1.5], got {self.beta}")


@dataclass(frozen=True)
class ContactState:
    """Penetration (m) and penetration rate (m/s); scalars or arrays."""

    penetration: float | np.ndarray
    rate: float | np.ndarray = 0.0


def hunt_crossley(kappa, lambda_, beta, eps, eps_dot):
    """Vectorised Hunt-Crossley law, zero out of contact."""
    eps = np.asarray(eps, dtype=float)
    e_beta = np.maximum(eps, 0.0) ** beta
    force = kappa * e_beta + lambda_ * e_beta * eps_dot
    force = np.where(eps >= 0.0, force, 0.0)
    return force if force.ndim else float(force)


def hc_force(p: ViscoelasticParams, c: ContactState):
    """Hunt-Crossley tissue force ``kappa eps^beta + lambda eps^beta eps_dot``."""
    return hunt_crossley(p.kappa, p.lambda_, p.beta, c.penetration, c.rate)


def kv_force(k: float, d: float, c: ContactState):
    """Kelvin-Voigt spring-damper force ``k eps + d eps_dot``, zero out of contact."""
    if k < 0 or d < 0:
        raise ValueError("k and d must be non-negative")
    eps = np.asarray(c.penetration, dtype=float)
    force = np.where(eps >= 0.0, k * eps + d * np.asarray(c.rate, dtype=float), 0.0)
    return force if force.ndim else float(force)


def _loop_force(p: ViscoelasticParams, eps, eps_dot, model: str):
    if model == "hc":
        return hc_force(p, ContactState(eps, eps_dot))
    if model == "kv":
        return kv_force(p.kappa, p.lambda_, ContactState(eps, eps_dot))
    raise ValueError(f"unknown contact model {model!r}")


def _check_closed(eps: np.ndarray):
    if eps.ndim != 1 or eps.size < 2:
        raise ValueError("trajectory needs at least two samples")
    if eps[0] > 0 or eps[-1] > 0:
        raise ValueError("trajectory must start and end out of contact (eps <= 0)")


def hysteresis_energy(p: ViscoelasticParams, t, eps, eps_dot=None, model: str = "hc") -> float:
    """Net work ``∮ F d eps`` over a contact cycle, trapezoidal rule.

    ``eps_dot`` defaults to ``np.gradient(eps, t)``. The cycle has to begin and
    end out of contact. For the Hunt-Crossley law the result is the energy
    dissipated by the tissue and is non-negative.
    """
    t = np.asarray(t, dtype=float)
    eps = np.asarray(eps, dtype=float)
    _check_closed(eps)
    if eps_dot is None:
        eps_dot = np.gradient(eps, t)
    force = _loop_force(p, eps, np.asarray(eps_dot, dtype=float), model)
    return float(np.trapezoid(force, eps))


def contact_discontinuity(p: ViscoelasticParams, t, eps, eps_dot, model: str = "hc") -> float:
    """Largest force jump where the trajectory enters or leaves contact.

    The force law is evaluated at ``eps = 0+`` with the penetration rate
    interpolated at each zero crossing. Hunt-Crossley gives exactly 0 there
    (the loop closes); Kelvin-Voigt gives ``d * eps_dot``.
    """
    t = np.asarray(t, dtype=float)
    eps = np.asarray(eps, dtype=float)
    eps_dot = np.asarray(eps_dot, dtype=float)
    _check_closed(eps)
    inside = eps > 0
    jumps = [0.0]
    for i in np.flatnonzero(inside[1:] != inside[:-1]):
        w = eps[i] / (eps[i] - eps[i + 1])
        rate = eps_dot[i] + w * (eps_dot[i + 1] - eps_dot[i])
        jumps.append(abs(float(_loop_force(p, 0.0, rate, model))))
    return max(jumps)


@dataclass(frozen=True)
class Rib:
    """Gaussian ridge inclusion, stiffer and higher than the surrounding tissue.

    ``orientation`` is the angle of the rib axis from +x (rad); ``width`` is the
    Gaussian standard deviation across the axis. Amplitudes are relative for
    kappa/lambda and absolute (m) for height.
    """

    center: tuple[float, float]
    orientation: float
    width: float
    kappa_amplitude: float
    height_amplitude: float
    lambda_amplitude: float = 0.0


@dataclass(frozen=True)
class BaseSurface:
    """Quadratic base height ``z0 + g.(p-c) + 0.5 (p-c)^T diag(curv) (p-c)``."""

    z0: float = 0.0
    slope: tuple[float, float] = (0.0, 0.0)
    curvature: tuple[float, float] = (0.0, 0.0)
    center: tuple[float, float] = (0.0, 0.0)


class PhantomPoint(NamedTuple):
    s: float
    ds_dx: float
    ds_dy: float
    kappa: float
    lambda_: float


@dataclass(frozen=True)
class Phantom:
    """Ground-truth body: analytic height field plus kappa/lambda fields."""

    bounds: tuple[float, float, float, float]
    kappa0: float
    lambda0: float
    beta: float = 1.35
    surface: BaseSurface = field(default_factory=BaseSurface)
    ribs: tuple[Rib, ...] = ()
    indenter_mass: float = 0.2
    soft_reference: tuple[float, float] | None = None

    def __post_init__(self):
        x0, x1, y0, y1 = self.bounds
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"degenerate workspace bounds {self.bounds}")
        if self.kappa0 <= 0 or self.lambda0 <= 0:
            raise ValueError("baseline kappa0 and lambda0 must be strictly positive")
        if any(r.kappa_amplitude < 0 or r.lambda_amplitude < 0 or r.width <= 0 for r in self.ribs):
            raise ValueError("rib amplitudes must be >= 0 and widths > 0")
        ViscoelasticParams(self.kappa0, self.lambda0, self.beta)
        object.__setattr__(self, "ribs", tuple(self.ribs))

    # -- geometry -----------------------------------------------------------
    @property
    def size(self) -> float:
        x0, x1, y0, y1 = self.bounds
        return max(x1 - x0, y1 - y0)

    def contains(self, x, y, tol: float = 1e-12):
        x0, x1, y0, y1 = self.bounds
        return (x >= x0 - tol) & (x <= x1 + tol) & (y >= y0 - tol) & (y <= y1 + tol)

    def _check(self, x, y):
        if not np.all(self.contains(np.asarray(x), np.asarray(y))):
            raise WorkspaceError(f"query ({x}, {y}) outside workspace {self.bounds}")

    # -- fields -------------------------------------------------------------
    def point(self, x: float, y: float, check: bool = True) -> PhantomPoint:
        """Scalar evaluation of height, height gradient, kappa and lambda."""
        if check:
            self._check(x, y)
        b = self.surface
        dx, dy = x - b.center[0], y - b.center[1]
        s = b.z0 + b.slope[0] * dx + b.slope[1] * dy + 0.5 * (b.curvature[0] * dx * dx + b.curvature[1] * dy * dy)
        sx = b.slope[0] + b.curvature[0] * dx
        sy = b.slope[1] + b.curvature[1] * dy
        ka = la = 0.0
        for r in self.ribs:
            sn, cs = math.sin(r.orientation), math.cos(r.orientation)
            d = -sn * (x - r.center[0]) + cs * (y - r.center[1])
            g = math.exp(-0.5 * d * d / (r.width * r.width))
            ka += r.kappa_amplitude * g
            la += r.lambda_amplitude * g
            dg = -g * d / (r.width * r.width)
            s += r.height_amplitude * g
            sx += r.height_amplitude * dg * (-sn)
            sy += r.height_amplitude * dg * cs
        return PhantomPoint(s, sx, sy, self.kappa0 * (1.0 + ka), self.lambda0 * (1.0 + la))

    def fields(self, x, y):
        """Vectorised ``(s, kappa, lambda)`` over arrays of coordinates."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        self._check(x, y)
        b = self.surface
        dx, dy = x - b.center[0], y - b.center[1]
        s = b.z0 + b.slope[0] * dx + b.slope[1] * dy + 0.5 * (b.curvature[0] * dx**2 + b.curvature[1] * dy**2)
        ka = np.zeros_like(s)
        la = np.zeros_like(s)
        for r in self.ribs:
            d = -math.sin(r.orientation) * (x - r.center[0]) + math.cos(r.orientation) * (y - r.center[1])
            g = np.exp(-0.5 * (d / r.width) ** 2)
            s = s + r.height_amplitude * g
            ka = ka + r.kappa_amplitude * g
            la = la + r.lambda_amplitude * g
        return s, self.kappa0 * (1.0 + ka), self.lambda0 * (1.0 + la)

    def height(self, x, y):
        return self.fields(x, y)[0]

    def params_at(self, x: float, y: float) -> ViscoelasticParams:
        pt = self.point(x, y)
        return ViscoelasticParams(pt.kappa, pt.lambda_, self.beta)

    # -- persistence --------------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["ribs"] = [asdict(r) for r in self.ribs]
        return {"format": PHANTOM_FORMAT, **d}

    @classmethod
    def from_dict(cls, d: dict) -> "Phantom":
        if d.get("format") != PHANTOM_FORMAT:
            raise ValueError(f"format: expected {PHANTOM_FORMAT}, got {d.get('format')!r}")
        known = {"format", "bounds", "kappa0", "lambda0", "beta", "surface", "ribs", "indenter_mass", "soft_reference"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown phantom field(s): {sorted(unknown)}")
        try:
            surf = d.get("surface", {})
            ribs = []
            for i, r in enumerate(d.get("ribs", [])):
                try:
                    ribs.append(Rib(center=tuple(r["center"]), orientation=float(r.get("orientation", 0.0)),
                                    width=float(r["width"]), kappa_amplitude=float(r["kappa_amplitude"]),
                                    height_amplitude=float(r.get("height_amplitude", 0.0)),
                                    lambda_amplitude=float(r.get("lambda_amplitude", 0.0))))
                except KeyError as exc:
                    raise ValueError(f"ribs[{i}].{exc.args[0]}: missing") from None
            ref = d.get("soft_reference")
            return cls(
                bounds=tuple(float(v) for v in d["bounds"]),
                kappa0=float(d["kappa0"]),
                lambda0=float(d["lambda0"]),
                beta=float(d.get("beta", 1.35)),
                surface=BaseSurface(
                    z0=float(surf.get("z0", 0.0)),
                    slope=tuple(surf.get("slope", (0.0, 0.0))),
                    curvature=tuple(surf.get("curvature", (0.0, 0.0))),
                    center=tuple(surf.get("center", (0.0, 0.0))),
                ),
                ribs=tuple(ribs),
                indenter_mass=float(d.get("indenter_mass", 0.2)),
                soft_reference=None if ref is None else tuple(ref),
            )
        except KeyError as exc:
            raise ValueError(f"{exc.args[0]}: missing") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Phantom":
        return cls.from_dict(json.loads(Path(path).read_text()))


def phantom_query(ph: Phantom, x: float, y: float) -> tuple[float, float, float]:
    """Exact ``(s, kappa, lambda)`` at ``(x, y)``; raises WorkspaceError outside bounds."""
    pt = ph.point(x, y)
    return pt.s, pt.kappa, pt.lambda_


def default_phantom() -> Phantom:
    """10 x 10 cm chest-like patch: soft band for y < 3 cm, four ribs along x."""
    ribs = tuple(
        Rib(center=(0.05, yc), orientation=0.0, width=0.008, kappa_amplitude=ka,
            height_amplitude=h, lambda_amplitude=la)
        for yc, ka, h, la in [
            (0.055, 3.5, 0.003, 1.0),
            (0.070, 3.5, 0.003, 1.0),
            (0.085, 3.0, 0.0025, 0.8),
            (0.100, 1.5, 0.0015, 0.4),
        ]
    )
    return Phantom(
        bounds=(0.0, 0.1, 0.0, 0.1),
        kappa0=1000.0,
        lambda0=2000.0,
        beta=1.35,
        surface=BaseSurface(z0=0.0, slope=(0.02, 0.0), curvature=(-0.4, -0.4), center=(0.05, 0.05)),
        ribs=ribs,
        indenter_mass=0.2,
        soft_reference=(0.05, 0.012),
    )


class ProbeSample(NamedTuple):
    t: float
    x: float
    y: float
    z_ee: float
    zd_ee: float
    zdd_ee: float
    f_sensor: float


PALPATION_COLUMNS = ProbeSample._fields


@dataclass(frozen=True)
class PalpationRecord:
    """Column-wise storage of a palpation; iterates as ``ProbeSample`` rows."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z_ee: np.ndarray
    zd_ee: np.ndarray
    zdd_ee: np.ndarray
    f_sensor: np.ndarray

    def __post_init__(self):
        n = len(self.t)
        for name in PALPATION_COLUMNS:
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise ValueError(f"column {name} has shape {arr.shape}, expected ({n},)")
            object.__setattr__(self, name, arr)
        if n > 1:
            step = np.diff(self.t)
            if not np.all(step > 0):
                raise ValueError("sample times must be strictly increasing")
            if np.ptp(step) > 1e-6 * step.mean() + 1e-12 * np.abs(self.t).max():
                raise ValueError("sample times must have a fixed step")

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[ProbeSample]:
        cols = [getattr(self, c) for c in PALPATION_COLUMNS]
        for row in zip(*cols):
            yield ProbeSample(*(float(v) for v in row))

    @classmethod
    def from_samples(cls, samples: Sequence[ProbeSample]) -> "PalpationRecord":
        arr = np.array([tuple(s) for s in samples], dtype=float).reshape(-1, len(PALPATION_COLUMNS))
        return cls(*arr.T)

    def with_time_shift(self, dt: float) -> "PalpationRecord":
        return PalpationRecord(self.t + dt, self.x, self.y, self.z_ee, self.zd_ee, self.zdd_ee, self.f_sensor)

    def head(self, n: int) -> "PalpationRecord":
        return PalpationRecord(*(getattr(self, c)[:n] for c in PALPATION_COLUMNS))

    def to_csv(self, path) -> None:
        data = np.column_stack([getattr(self, c) for c in PALPATION_COLUMNS])
        np.savetxt(path, data, delimiter=",", header=",".join(PALPATION_COLUMNS), comments="", fmt="%.12g")

    @classmethod
    def from_csv(cls, path) -> "PalpationRecord":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        if tuple(header) != PALPATION_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(PALPATION_COLUMNS)}")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(*data.T)
