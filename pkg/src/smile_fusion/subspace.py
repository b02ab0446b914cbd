"""Zone partition of a pre-trained spectrum and subspace projections of deltas.

Given the full SVD ``W = U S V^T`` of a pre-trained weight, any delta ``dW``
expands in the basis ``{u_j v_k^T}`` with coefficients ``U^T dW V``. The
leading singular directions (zone I) carry half of the spectral mass; the
rest of the in-rank directions form zone II, and directions beyond ``rank(W)``
form zone III.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError, ShapeError
from .linalg import SvdFactors
from .tensor import as_matrix, as_vector, frobenius_norm, frozen


class Zone(str, enum.Enum):
    I = "I"
    II = "II"
    II_AND_III = "II_AND_III"


@dataclass(frozen=True)
class ZonePartition:
    r_half: int
    r: int
    m: int
    n: int

    def row_range(self, zone: Zone) -> tuple[int, int]:
        return self._ranges(zone)[0]

    def col_range(self, zone: Zone) -> tuple[int, int]:
        return self._ranges(zone)[1]

    def _ranges(self, zone: Zone):
        zone = Zone(zone)
        if zone is Zone.I:
            return (0, self.r_half), (0, self.r_half)
        if zone is Zone.II:
            return (self.r_half, self.r), (self.r_half, self.r)
        return (self.r_half, self.m), (self.r_half, self.n)


def zone_partition(sigma, rank: int, shape: tuple[int, int] | None = None) -> ZonePartition:
    """``r_half`` is the first index whose running sum reaches half the total."""
    sigma = as_vector(sigma)
    if rank > len(sigma):
        raise ShapeError(f"rank {rank} exceeds number of singular values {len(sigma)}")
    head = sigma[:rank]
    total = float(head.sum())
    if rank == 0 or total <= 0.0:
        raise DegenerateError("zone partition of an all-zero spectrum")
    running = np.cumsum(head)
    r_half = int(np.argmax(running >= total / 2.0)) + 1
    m, n = shape if shape is not None else (len(sigma), len(sigma))
    return ZonePartition(r_half=r_half, r=rank, m=m, n=n)


def partition_of(f: SvdFactors) -> ZonePartition:
    return zone_partition(f.sigma, f.rank, f.shape)


@dataclass(frozen=True)
class ProjectionCoefficients:
    """``delta[j, k] = <dW, u_j v_k^T>``."""

    delta: np.ndarray

    def reconstruct(self, f: SvdFactors) -> np.ndarray:
        return f.U @ self.delta @ f.V.T


def _check_full(dW: np.ndarray, f: SvdFactors):
    m, n = dW.shape
    if f.U.shape != (m, m) or f.V.shape != (n, n):
        raise ShapeError(
            f"need full-mode factors matching delta {dW.shape}; "
            f"got U {f.U.shape}, V {f.V.shape}"
        )


def projection_coefficients(dW, f: SvdFactors) -> ProjectionCoefficients:
    dW = as_matrix(dW)
    _check_full(dW, f)
    return ProjectionCoefficients(frozen(f.U.T @ dW @ f.V))


def project_delta(dW, f: SvdFactors, zone: Zone, part: ZonePartition | None = None) -> np.ndarray:
    """``P_U dW P_V`` restricted to the zone's row and column blocks."""
    dW = as_matrix(dW)
    _check_full(dW, f)
    part = part or partition_of(f)
    (r0, r1), (c0, c1) = part.row_range(zone), part.col_range(zone)
    u = f.U[:, r0:r1]
    v = f.V[:, c0:c1]
    return frozen(u @ (u.T @ dW @ v) @ v.T)


@dataclass(frozen=True)
class ZoneProjection:
    weight: np.ndarray
    empty_zone: bool


def project_zone(W, dW, f: SvdFactors, zone: Zone) -> ZoneProjection:
    """Merged weight ``W + P_U dW P_V`` for one zone.

    An empty zone (``r_half == r`` for zone II, or nothing past ``r_half``)
    returns ``W`` unchanged with ``empty_zone`` set.
    """
    W = as_matrix(W)
    dW = as_matrix(dW)
    if W.shape != dW.shape:
        raise ShapeError(f"W {W.shape} and dW {dW.shape} differ")
    part = partition_of(f)
    (r0, r1), (c0, c1) = part.row_range(zone), part.col_range(zone)
    if r1 <= r0 or c1 <= c0:
        return ZoneProjection(W, True)
    return ZoneProjection(frozen(W + project_delta(dW, f, zone, part)), False)


def zone_energies(dW, f: SvdFactors) -> dict:
    """Squared Frobenius mass of ``dW`` in each zone block, plus the total."""
    coeffs = projection_coefficients(dW, f).delta
    part = partition_of(f)
    out = {}
    for zone in Zone:
        (r0, r1), (c0, c1) = part.row_range(zone), part.col_range(zone)
        block = coeffs[r0:r1, c0:c1]
        out[zone.value] = float(np.sum(block * block))
    out["total"] = frobenius_norm(dW) ** 2
    return out
