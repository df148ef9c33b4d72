"""Free-space spherical-wave channel between a linear BS array and a user array.

Antenna ``n1`` of the BS sits at offset ``d1 = n1 * d`` along the BS array and
antenna ``n2`` of the user at ``d2 = n2 * d``; indices are 1-based, so the
first antenna of each array is already one spacing away from the origin.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

DEFAULT_WAVELENGTH = 0.01  # 30 GHz
DEFAULT_SPACING = DEFAULT_WAVELENGTH / 2


class GeometryError(ValueError):
    """Invalid geometry parameters or antenna indices."""


class DegenerateGeometryError(GeometryError):
    """User placed on or inside the array so that a pairwise distance vanishes."""


@dataclass(frozen=True)
class SystemGeometry:
    n_bs_antennas: int
    n_user_antennas: int
    antenna_spacing: float
    wavelength: float
    range: float
    transmit_angle: float
    relative_angle: float

    def __post_init__(self):
        if self.n_bs_antennas < 1 or self.n_user_antennas < 1:
            raise GeometryError("antenna counts must be >= 1")
        for name in ("antenna_spacing", "wavelength", "range"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise GeometryError(f"{name} must be finite and > 0, got {value!r}")
        for name in ("transmit_angle", "relative_angle"):
            if not math.isfinite(getattr(self, name)):
                raise GeometryError(f"{name} must be finite")
        if self.range <= self.min_range:
            raise GeometryError(
                f"range {self.range} m must exceed (N1 + N2) * d = {self.min_range} m"
            )

    @property
    def min_range(self) -> float:
        """Validity guard: no user inside the combined array extent."""
        return (self.n_bs_antennas + self.n_user_antennas) * self.antenna_spacing

    @property
    def aperture(self) -> float:
        return (self.n_bs_antennas - 1) * self.antenna_spacing

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ChannelMatrix:
    """Complex ``N2 x N1`` channel with the geometry that produced it."""

    entries: np.ndarray
    geometry: SystemGeometry

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape


def spherical_distance(r, theta, phi, d1, d2):
    """Vectorized distance between BS offset ``d1`` and user offset ``d2``.

    Expanded form of ``|(r cos(theta) - d2 sin(phi), r sin(theta) + d2 cos(phi) - d1)|``;
    the cross term is ``r d2 sin(theta - phi)``. All arguments broadcast.
    Non-positive radicands come back as NaN; callers decide whether that is
    an error.
    """
    radicand = (
        r**2
        + d1**2
        + d2**2
        + 2.0 * (r * d2 * np.sin(theta - phi) - r * d1 * np.sin(theta) - d1 * d2 * np.cos(phi))
    )
    with np.errstate(invalid="ignore"):
        return np.where(radicand > 0, np.sqrt(np.abs(radicand)), np.nan)


def _check_index(name: str, value: int, upper: int) -> None:
    if not (1 <= value <= upper):
        raise GeometryError(f"{name}={value} outside 1..{upper}")


def pairwise_distance(geometry: SystemGeometry, n1: int, n2: int) -> float:
    """Distance in meters from BS antenna ``n1`` to user antenna ``n2``."""
    _check_index("n1", n1, geometry.n_bs_antennas)
    _check_index("n2", n2, geometry.n_user_antennas)
    d = geometry.antenna_spacing
    dist = float(
        spherical_distance(
            geometry.range, geometry.transmit_angle, geometry.relative_angle, n1 * d, n2 * d
        )
    )
    if not dist > 0:
        raise DegenerateGeometryError(f"non-positive distance for antenna pair ({n2}, {n1})")
    return dist


def _path_response(dist: np.ndarray, wavelength: float) -> np.ndarray:
    return np.exp(-2j * np.pi * dist / wavelength) / dist


def channel_entry(geometry: SystemGeometry, n1: int, n2: int) -> complex:
    dist = pairwise_distance(geometry, n1, n2)
    return complex(_path_response(np.array([dist]), geometry.wavelength)[0])


def distance_matrix(geometry: SystemGeometry) -> np.ndarray:
    """``N2 x N1`` array of pairwise distances (float64)."""
    d = geometry.antenna_spacing
    d1 = np.arange(1, geometry.n_bs_antennas + 1, dtype=np.float64) * d
    d2 = np.arange(1, geometry.n_user_antennas + 1, dtype=np.float64)[:, None] * d
    dist = spherical_distance(
        geometry.range, geometry.transmit_angle, geometry.relative_angle, d1[None, :], d2
    )
    if not np.all(dist > 0):
        raise DegenerateGeometryError("geometry yields a non-positive pairwise distance")
    return dist


def channel_matrix(geometry: SystemGeometry) -> ChannelMatrix:
    entries = _path_response(distance_matrix(geometry), geometry.wavelength)
    return ChannelMatrix(entries=entries, geometry=geometry)


def rayleigh_distance(geometry: SystemGeometry) -> float:
    """Near-field boundary ``2 D^2 / lambda`` for the BS aperture ``D = (N1 - 1) d``."""
    return 2.0 * geometry.aperture**2 / geometry.wavelength
