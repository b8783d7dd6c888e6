"""Geodesic shooting in the band: EPDiff + displacement flow, then spatial warping."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .freq import (
    BandSpec,
    FreqVectorField,
    SmoothingOperator,
    apply_K,
    apply_L,
    band_to_spatial,
    correlate,
    divergence,
    jacobian,
    matvec_convolve,
    tensor_product,
)


class IntegrationDiverged(RuntimeError):
    def __init__(self, step: int, what: str = "integration"):
        super().__init__(f"{what} produced non-finite values at step {step}")
        self.step = step


@dataclass(frozen=True)
class GeodesicPath:
    steps: int
    velocities: tuple
    displacement: FreqVectorField | None = None

    @property
    def dt(self) -> float:
        return 1.0 / self.steps

    @property
    def spec(self) -> BandSpec:
        return self.velocities[0].spec


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Spatial map ``psi(x) = x + u(x)``; ``displacement`` has shape ``(*batch, d, *grid)``."""

    displacement: np.ndarray
    space_dim: int | None = None  # inferred from the shape when omitted

    @property
    def dim(self) -> int:
        return self.space_dim or _infer_dim(self.displacement)

    @property
    def grid(self) -> tuple:
        return self.displacement.shape[-self.dim:]

    def coordinates(self) -> np.ndarray:
        return identity_grid(self.grid) + self.displacement

    @classmethod
    def identity(cls, grid: Sequence[int]) -> "DeformationField":
        grid = tuple(grid)
        return cls(np.zeros((len(grid),) + grid))


def _infer_dim(u: np.ndarray) -> int:
    for d in (3, 2):
        if u.ndim >= d + 1 and u.shape[-d - 1] == d:
            return d
    raise ValueError(f"cannot read a displacement field from shape {u.shape}")


def identity_grid(grid: Sequence[int]) -> np.ndarray:
    return np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in grid], indexing="ij"))


def epdiff_rhs(v: FreqVectorField, op: SmoothingOperator) -> FreqVectorField:
    """``-K[(Dv)^T * m + div(m (x) v)]`` with momentum ``m = L v``."""
    m = apply_L(op, v)
    return -apply_K(op, correlate(jacobian(v), m) + divergence(tensor_product(m, v)))


def integrate_epdiff(v0: FreqVectorField, op: SmoothingOperator, steps: int) -> GeodesicPath:
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    dt = 1.0 / steps
    vs = [v0]
    v = v0
    for t in range(steps):
        with np.errstate(over="ignore", invalid="ignore"):  # checked just below
            v = v + dt * epdiff_rhs(v, op)
        if not np.all(np.isfinite(v.coeffs)):
            raise IntegrationDiverged(t + 1, "EPDiff integration")
        vs.append(v)
    return GeodesicPath(steps, tuple(vs))


def integrate_diffeo(path: GeodesicPath) -> FreqVectorField:
    """Forward Euler on ``du/dt = -v - (Du) v`` from ``u = 0``; returns ``u`` at ``t = 1``."""
    dt = path.dt
    v0 = path.velocities[0]
    u = FreqVectorField.zeros(v0.spec, v0.batch_shape)
    for t in range(path.steps):
        v = path.velocities[t]
        with np.errstate(over="ignore", invalid="ignore"):
            u = u - dt * (v + matvec_convolve(jacobian(u), v))
        if not np.all(np.isfinite(u.coeffs)):
            raise IntegrationDiverged(t + 1, "diffeomorphism integration")
    return u


def shoot(v0: FreqVectorField, op: SmoothingOperator, steps: int) -> GeodesicPath:
    path = integrate_epdiff(v0, op, steps)
    return GeodesicPath(path.steps, path.velocities, integrate_diffeo(path))


def to_deformation(u: FreqVectorField, grid: Sequence[int] | None = None) -> DeformationField:
    return DeformationField(band_to_spatial(u, grid), u.spec.dim)


def _interp_periodic(img: np.ndarray, coords: np.ndarray, d: int, order: int) -> np.ndarray:
    grid = img.shape[img.ndim - d:]
    strides = np.cumprod((1,) + tuple(grid[::-1]))[:-1][::-1]
    coords = np.moveaxis(coords, -d - 1, 0)
    img_batch = img.shape[: img.ndim - d]
    batch = np.broadcast_shapes(img_batch, coords.shape[1: coords.ndim - d])

    if not img_batch:
        flat = img.ravel()

        def gather(idx):
            return flat[sum(idx[k] * strides[k] for k in range(d))]
    else:
        flat = np.broadcast_to(img, batch + tuple(grid)).reshape(batch + (-1,))

        def gather(idx):
            lin = sum(idx[k] * strides[k] for k in range(d))
            lin = np.broadcast_to(lin, batch + tuple(grid)).reshape(batch + (-1,))
            return np.take_along_axis(flat, lin, axis=-1).reshape(batch + tuple(grid))

    if order == 0:
        return gather([np.rint(coords[k]).astype(np.int64) % grid[k] for k in range(d)])
    lo, hi, frac = [], [], []
    for k in range(d):
        c = np.mod(coords[k], grid[k])
        b = np.floor(c)
        frac.append(c - b)
        b = b.astype(np.int64) % grid[k]
        lo.append(b)
        hi.append(np.where(b == grid[k] - 1, 0, b + 1))
    out = 0.0
    for corner in itertools.product((0, 1), repeat=d):
        w = 1.0
        for k in range(d):
            w = w * (frac[k] if corner[k] else 1.0 - frac[k])
        out = out + w * gather([hi[k] if corner[k] else lo[k] for k in range(d)])
    return np.broadcast_to(out, batch + tuple(grid)).copy() if np.ndim(out) else out


def warp(img: np.ndarray, psi: DeformationField, order: int = 1) -> np.ndarray:
    """``img(psi(x))`` with multilinear (``order=1``) or nearest (``order=0``) periodic sampling."""
    img = np.asarray(img, dtype=float)
    d = psi.dim
    if tuple(img.shape[img.ndim - d:]) != tuple(psi.grid):
        raise ValueError(f"image grid {img.shape[img.ndim - d:]} does not match deformation grid {psi.grid}")
    return _interp_periodic(img, psi.coordinates(), d, order)


def warp_labels(labels: np.ndarray, psi: DeformationField, n_labels: int | None = None) -> np.ndarray:
    """Warp an integer label map by interpolating one-hot channels and taking the argmax."""
    labels = np.asarray(labels)
    n = int(labels.max()) + 1 if n_labels is None else n_labels
    warped = np.stack([warp((labels == k).astype(float), psi) for k in range(n)])
    return np.argmax(warped, axis=0)


def det_jacobian(psi: DeformationField) -> np.ndarray:
    """Pointwise determinant of the central-difference Jacobian of ``x + u``."""
    u = psi.displacement
    d = psi.dim
    nd = u.ndim
    J = np.empty(u.shape[: nd - d - 1] + (d, d) + u.shape[nd - d:])
    for j in range(d):
        uj = u[(Ellipsis, j) + (slice(None),) * d]
        for k in range(d):
            ax = uj.ndim - d + k
            J[(Ellipsis, j, k) + (slice(None),) * d] = (
                0.5 * (np.roll(uj, -1, axis=ax) - np.roll(uj, 1, axis=ax)) + (j == k)
            )
    J = np.moveaxis(J, (nd - d - 1, nd - d), (-2, -1))
    return np.linalg.det(J)


def approximate_inverse(psi: DeformationField, iters: int = 20) -> DeformationField:
    """Fixed-point inverse ``w <- -u(x + w)``."""
    u = psi.displacement
    d = psi.dim
    w = -u
    for _ in range(iters):
        coords = identity_grid(psi.grid) + w
        w = -np.stack([_interp_periodic(u[(Ellipsis, k) + (slice(None),) * d], coords, d, 1)
                       for k in range(d)], axis=-d - 1)
    return DeformationField(w, d)
