"""Lamb-Oseen vortex superposition used to simulate ocean currents."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CENTER_EPS = 1e-9
_SERIES_CUTOFF = 1e-4


@dataclass(frozen=True)
class VortexField:
    centers: np.ndarray  # (M, 2), metres
    strengths: np.ndarray  # (M,), m^2/s
    radii: np.ndarray  # (M,), metres

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=float))
        w = np.asarray(self.strengths, dtype=float).reshape(-1)
        r = np.asarray(self.radii, dtype=float).reshape(-1)
        if c.shape != (w.size, 2) or r.size != w.size:
            raise ValueError("vortex table has inconsistent sizes")
        if np.any(r <= 0):
            raise ValueError("vortex radii must be positive")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "strengths", w)
        object.__setattr__(self, "radii", r)

    @property
    def M(self) -> int:
        return self.strengths.size

    def shifted(self, offsets: np.ndarray) -> "VortexField":
        return VortexField(self.centers + offsets, self.strengths, self.radii)


def _profile(u: np.ndarray, delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``s(u) = (1 - exp(-u/delta^2)) / (2 pi u)`` and ``ds/du`` for ``u = r^2``."""
    d2 = delta * delta
    a = u / d2
    small = a < _SERIES_CUTOFF
    safe_u = np.where(small, 1.0, u)
    em1 = -np.expm1(-a)
    s = np.where(small, (1.0 - a / 2.0 + a * a / 6.0) / (2 * np.pi * d2), em1 / (2 * np.pi * safe_u))
    ds_exact = (np.exp(-a) * a - em1) / (2 * np.pi * safe_u * safe_u)
    ds_series = (-0.5 + a / 3.0) / (2 * np.pi * d2 * d2)
    return s, np.where(small, ds_series, ds_exact)


def vortex_velocity(field: VortexField, x: np.ndarray) -> np.ndarray:
    """Current velocity (m/s) at points ``x`` of shape ``(2,)`` or ``(..., 2)``."""
    return velocity_and_jacobian(field, x)[0]


def velocity_and_jacobian(field: VortexField, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Velocity ``(..., 2)`` and spatial Jacobian ``(..., 2, 2)``.

    Inside ``CENTER_EPS`` of a center the velocity term takes its analytic
    limit 0 and the Jacobian term its limit ``Omega / (2 pi delta^2)``.
    """
    x = np.asarray(x, dtype=float)
    p = x[..., None, :] - field.centers  # (..., M, 2)
    u = np.einsum("...i,...i->...", p, p)
    s, ds = _profile(u, field.radii)
    at_center = u < CENTER_EPS**2
    s_v = np.where(at_center, 0.0, s)
    ds = np.where(at_center, 0.0, ds)
    w = field.strengths
    # Omega p = w * (-p_y, p_x)
    rot = np.stack([-p[..., 1], p[..., 0]], axis=-1) * w[:, None]
    vel = np.sum(s_v[..., None] * rot, axis=-2)
    omega = np.zeros(w.shape + (2, 2))
    omega[:, 0, 1] = -w
    omega[:, 1, 0] = w
    jac = s[..., None, None] * omega + 2.0 * ds[..., None, None] * rot[..., :, None] * p[..., None, :]
    return vel, np.sum(jac, axis=-3)
