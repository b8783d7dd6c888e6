"""Truncated Fourier representations of scalar, vector and tensor fields.

Coefficients live on a centered band ``{-band/2, ..., band/2 - 1}`` per axis,
with the zero frequency at index ``band // 2``. The transform pair is scaled
``1/N`` forward and ``1`` backward, so a constant image ``c`` has DC
coefficient ``c``. The unpaired ``-band/2`` slab of every axis is kept at zero
so that Hermitian symmetry can hold exactly.

All field types accept extra leading batch axes on ``coeffs``; the component
axes sit directly in front of the ``dim`` frequency axes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence, Union

import numpy as np
import scipy.fft as sfft


@dataclass(frozen=True)
class BandSpec:
    dim: int
    band: int
    grid: tuple

    def __post_init__(self):
        grid = self.grid
        if np.isscalar(grid):
            grid = (int(grid),) * self.dim
        grid = tuple(int(g) for g in grid)
        object.__setattr__(self, "grid", grid)
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if len(grid) != self.dim:
            raise ValueError(f"grid {grid} does not have {self.dim} axes")
        if self.band < 2 or self.band % 2:
            raise ValueError(f"band must be a positive even integer, got {self.band}")
        if any(self.band > g for g in grid):
            raise ValueError(f"band {self.band} exceeds grid {grid}")

    @property
    def shape(self) -> tuple:
        return (self.band,) * self.dim

    @property
    def center(self) -> int:
        return self.band // 2

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.grid))

    def freqs(self) -> np.ndarray:
        """Signed integer frequency indices of one band axis."""
        return np.arange(-self.band // 2, self.band // 2)

    def with_grid(self, grid) -> "BandSpec":
        return BandSpec(self.dim, self.band, grid)


def _freq_axes(dim: int) -> tuple:
    return tuple(range(-dim, 0))


def zero_unpaired(coeffs: np.ndarray, dim: int) -> np.ndarray:
    """Zero the ``-band/2`` slab along each frequency axis (in place)."""
    for ax in range(dim):
        idx = [slice(None)] * coeffs.ndim
        idx[coeffs.ndim - dim + ax] = 0
        coeffs[tuple(idx)] = 0.0
    return coeffs


def hermitian_mirror(coeffs: np.ndarray, dim: int) -> np.ndarray:
    """Return ``conj(c(-xi))`` laid out at ``xi``; zero on the unpaired slab."""
    out = np.zeros_like(coeffs)
    inner = (Ellipsis,) + (slice(1, None),) * dim
    out[inner] = np.conj(np.flip(coeffs[inner], axis=_freq_axes(dim)))
    return out


def symmetrize(coeffs: np.ndarray, dim: int) -> np.ndarray:
    """Project onto Hermitian-symmetric coefficients (spectra of real fields)."""
    out = 0.5 * (coeffs + hermitian_mirror(coeffs, dim))
    return zero_unpaired(out, dim)


class _FreqField:
    rank = 0

    def __init__(self, spec: BandSpec, coeffs):
        c = np.array(coeffs, dtype=np.complex128)
        tail = (spec.dim,) * self.rank + spec.shape
        if c.ndim < len(tail) or c.shape[c.ndim - len(tail):] != tail:
            raise ValueError(
                f"{type(self).__name__} coeffs shape {c.shape} does not end with {tail}"
            )
        zero_unpaired(c, spec.dim)
        c.flags.writeable = False
        self.spec = spec
        self.coeffs = c

    @property
    def batch_shape(self) -> tuple:
        return self.coeffs.shape[: self.coeffs.ndim - self.rank - self.spec.dim]

    def _like(self, coeffs):
        return type(self)(self.spec, coeffs)

    def _check(self, other):
        if type(other) is not type(self):
            raise TypeError(f"cannot combine {type(self).__name__} with {type(other).__name__}")
        if other.spec != self.spec:
            raise ValueError(f"band spec mismatch: {self.spec} vs {other.spec}")

    def __add__(self, other):
        self._check(other)
        return self._like(self.coeffs + other.coeffs)

    def __sub__(self, other):
        self._check(other)
        return self._like(self.coeffs - other.coeffs)

    def __mul__(self, s):
        return self._like(self.coeffs * s)

    __rmul__ = __mul__

    def __neg__(self):
        return self._like(-self.coeffs)

    def __repr__(self):
        return f"{type(self).__name__}(spec={self.spec}, coeffs.shape={self.coeffs.shape})"

    def is_hermitian(self, atol: float = 1e-12) -> bool:
        c = self.coeffs
        scale = max(1.0, float(np.abs(c).max(initial=0.0)))
        return bool(np.allclose(c, hermitian_mirror(c, self.spec.dim), rtol=0, atol=atol * scale))

    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.coeffs) ** 2)))

    @classmethod
    def zeros(cls, spec: BandSpec, batch: tuple = ()):
        return cls(spec, np.zeros(tuple(batch) + (spec.dim,) * cls.rank + spec.shape, complex))


class FreqScalarField(_FreqField):
    rank = 0


class FreqVectorField(_FreqField):
    rank = 1

    def component(self, j: int) -> FreqScalarField:
        return FreqScalarField(self.spec, self.coeffs[(Ellipsis, j) + (slice(None),) * self.spec.dim])


class FreqTensorField(_FreqField):
    rank = 2


AnyFreqField = Union[FreqScalarField, FreqVectorField, FreqTensorField]
_BY_RANK = {0: FreqScalarField, 1: FreqVectorField, 2: FreqTensorField}


def inner(a: _FreqField, b: _FreqField) -> np.ndarray:
    """Coefficientwise Hermitian pairing ``Re sum conj(a) b`` (per batch entry)."""
    a._check(b)
    axes = tuple(range(a.coeffs.ndim - a.rank - a.spec.dim, a.coeffs.ndim))
    return np.real(np.sum(np.conj(a.coeffs) * b.coeffs, axis=axes))


def random_field(spec: BandSpec, rng: np.random.Generator, rank: int = 1,
                 batch: tuple = (), scale: float = 1.0, decay: float = 0.0):
    """Random Hermitian field; ``decay`` damps coefficients as ``exp(-decay*|xi|^2)``."""
    shape = tuple(batch) + (spec.dim,) * rank + spec.shape
    c = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    if decay:
        xi2 = sum(k.astype(float) ** 2 for k in np.meshgrid(*[spec.freqs()] * spec.dim, indexing="ij"))
        c = c * np.exp(-decay * xi2)
    return _BY_RANK[rank](spec, scale * symmetrize(c, spec.dim))


# --- spatial <-> frequency bridges ------------------------------------------

def _band_index(band: int, n: int) -> np.ndarray:
    return np.arange(-band // 2, band // 2) % n


def _embed(coeffs: np.ndarray, dim: int, band: int, size: Sequence[int]) -> np.ndarray:
    full = np.zeros(coeffs.shape[: coeffs.ndim - dim] + tuple(size), dtype=np.complex128)
    full[(Ellipsis,) + np.ix_(*[_band_index(band, n) for n in size])] = coeffs
    return full


def _extract(full: np.ndarray, dim: int, band: int) -> np.ndarray:
    size = full.shape[full.ndim - dim:]
    out = full[(Ellipsis,) + np.ix_(*[_band_index(band, n) for n in size])]
    return zero_unpaired(np.ascontiguousarray(out), dim)


def _is_hermitian(coeffs: np.ndarray, dim: int, rtol: float = 1e-12) -> bool:
    scale = float(np.abs(coeffs).max(initial=0.0))
    return float(np.abs(coeffs - hermitian_mirror(coeffs, dim)).max(initial=0.0)) <= rtol * scale


def _synthesize(coeffs: np.ndarray, dim: int, band: int, size: Sequence[int]) -> np.ndarray:
    """Spatial samples of a band field on a grid of ``size``.

    Hermitian coefficients go through a real inverse FFT and give a real
    array; anything else gives a complex array.
    """
    axes = _freq_axes(dim)
    size = tuple(size)
    if not _is_hermitian(coeffs, dim):
        return sfft.ifftn(_embed(coeffs, dim, band, size), axes=axes, norm="forward")
    half = size[:-1] + (size[-1] // 2 + 1,)
    full = np.zeros(coeffs.shape[: coeffs.ndim - dim] + half, dtype=np.complex128)
    lo = band // 2
    idx = [_band_index(band, n) for n in size[:-1]] + [np.arange(lo)]
    full[(Ellipsis,) + np.ix_(*idx)] = coeffs[..., lo:]
    return sfft.irfftn(full, s=size, axes=axes, norm="forward")


def _analyze(values: np.ndarray, dim: int, band: int) -> np.ndarray:
    """Forward transform of spatial samples, truncated to the band."""
    axes = _freq_axes(dim)
    if np.iscomplexobj(values):
        return _extract(sfft.fftn(values, axes=axes, norm="forward"), dim, band)
    size = values.shape[values.ndim - dim:]
    half = sfft.rfftn(values, axes=axes, norm="forward")
    f = np.arange(-band // 2, band // 2)
    pos = half[(Ellipsis,) + np.ix_(*([f % n for n in size[:-1]] + [np.abs(f)]))]
    neg = half[(Ellipsis,) + np.ix_(*([(-f) % n for n in size[:-1]] + [np.abs(f)]))]
    out = np.where(f >= 0, pos, np.conj(neg))
    return zero_unpaired(out, dim)


def spatial_to_band(x, spec: BandSpec, rank: int | None = None):
    """Forward DFT of a real scalar or vector field, truncated to the band.

    ``rank`` is inferred from ``x.ndim`` (``dim`` -> scalar, ``dim + 1`` ->
    vector) unless given; pass it explicitly for batched input.
    """
    x = np.asarray(x)
    d = spec.dim
    if tuple(x.shape[x.ndim - d:]) != spec.grid:
        raise ValueError(f"field grid {x.shape[x.ndim - d:]} does not match spec grid {spec.grid}")
    if rank is None:
        if x.ndim == d:
            rank = 0
        elif x.ndim == d + 1 and x.shape[0] == d:
            rank = 1
        else:
            raise ValueError(f"cannot infer field rank from shape {x.shape}")
    return _BY_RANK[rank](spec, _analyze(x, d, spec.band))


def band_to_spatial(f: _FreqField, grid: Sequence[int] | int | None = None) -> np.ndarray:
    """Zero-pad to the full spectrum and invert; returns the real part."""
    spec = f.spec
    grid = spec.grid if grid is None else BandSpec(spec.dim, spec.band, grid).grid
    return np.real(_synthesize(f.coeffs, spec.dim, spec.band, grid))


# --- band operators ---------------------------------------------------------

def pad_size(spec: BandSpec) -> tuple:
    """Smallest even grid on which products of band fields alias nothing into the band.

    Products reach ``|xi| <= band - 2``; an alias lands at ``xi - P`` and stays
    out of the band whenever ``P >= 3 band / 2 - 1``.
    """
    return (3 * spec.band // 2 + (3 * spec.band // 2) % 2,) * spec.dim


def _padded(f: _FreqField) -> np.ndarray:
    return _synthesize(f.coeffs, f.spec.dim, f.spec.band, pad_size(f.spec))


def _same_spec(*fields):
    spec = fields[0].spec
    for f in fields[1:]:
        if f.spec != spec:
            raise ValueError(f"band spec mismatch: {spec} vs {f.spec}")
    return spec


def truncated_convolve(a: FreqScalarField, b: FreqScalarField) -> FreqScalarField:
    """Alias-free circular convolution of two band spectra, truncated back to the band."""
    spec = _same_spec(a, b)
    prod = _padded(a) * _padded(b)
    return FreqScalarField(spec, _analyze(prod, spec.dim, spec.band))


def diff_symbols(spec: BandSpec) -> np.ndarray:
    """Central-difference multipliers ``i sin(2 pi xi_k / grid_k)``, shape ``(dim, *band)``."""
    d = spec.dim
    out = np.zeros((d,) + spec.shape, dtype=np.complex128)
    for k in range(d):
        s = 1j * np.sin(2 * np.pi * spec.freqs() / spec.grid[k])
        shape = [1] * d
        shape[k] = spec.band
        out[k] = np.broadcast_to(s.reshape(shape), spec.shape)
    return out


def jacobian(v: FreqVectorField) -> FreqTensorField:
    """Entry ``(j, k)`` is the central-difference derivative of ``v_j`` along axis ``k``."""
    d = v.spec.dim
    dv = np.expand_dims(v.coeffs, -d - 1) * diff_symbols(v.spec)
    return FreqTensorField(v.spec, dv)


def correlate(A: FreqTensorField, m: FreqVectorField) -> FreqVectorField:
    """Band form of ``A(x)^T m(x)``: component ``k`` is ``sum_j conj(A_jk) m_j``.

    The first factor enters conjugated, i.e. as a cross-correlation of
    coefficient sequences; for Hermitian ``A`` this equals the transposed
    matrix-vector product of the real spatial fields.
    """
    spec = _same_spec(A, m)
    d = spec.dim
    As = _padded(A)
    ms = np.expand_dims(_padded(m), -d - 1)
    prod = np.sum(np.conj(As) * ms, axis=-d - 2)
    return FreqVectorField(spec, _analyze(prod, d, spec.band))


def tensor_product(m: FreqVectorField, v: FreqVectorField) -> FreqTensorField:
    """Band form of the outer product; entry ``(j, k)`` is ``m_j * v_k``."""
    spec = _same_spec(m, v)
    d = spec.dim
    prod = np.expand_dims(_padded(m), -d - 1) * np.expand_dims(_padded(v), -d - 2)
    return FreqTensorField(spec, _analyze(prod, d, spec.band))


def divergence(M: FreqTensorField) -> FreqVectorField:
    """Row divergence: component ``j`` is ``sum_k D_k M_jk``."""
    d = M.spec.dim
    return FreqVectorField(M.spec, np.sum(M.coeffs * diff_symbols(M.spec), axis=-d - 1))


def matvec_convolve(A: FreqTensorField, v: FreqVectorField) -> FreqVectorField:
    """Band form of ``A(x) v(x)``: component ``j`` is ``sum_k A_jk * v_k``."""
    spec = _same_spec(A, v)
    d = spec.dim
    prod = np.sum(_padded(A) * np.expand_dims(_padded(v), -d - 2), axis=-d - 1)
    return FreqVectorField(spec, _analyze(prod, d, spec.band))


# --- smoothing operator -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class SmoothingOperator:
    """Diagonal band symbols of ``(-alpha Lap + I)^power`` and of its inverse."""

    alpha: float
    power: int
    spec: BandSpec
    lcoeffs: np.ndarray = field(repr=False)
    kcoeffs: np.ndarray = field(repr=False)

    @cached_property
    def max_symbol(self) -> float:
        return float(self.lcoeffs.max())


def make_operator(alpha: float, power: int, spec: BandSpec) -> SmoothingOperator:
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if int(power) != power or power < 1:
        raise ValueError(f"power must be a positive integer, got {power}")
    grids = np.meshgrid(*[spec.freqs() / g for g in spec.grid], indexing="ij")
    lap = sum(np.cos(2 * np.pi * k) - 1.0 for k in grids)
    lcoeffs = (-2.0 * alpha * lap + 1.0) ** int(power)
    kcoeffs = 1.0 / lcoeffs
    lcoeffs.flags.writeable = False
    kcoeffs.flags.writeable = False
    return SmoothingOperator(float(alpha), int(power), spec, lcoeffs, kcoeffs)


def _apply_symbol(op: SmoothingOperator, v: _FreqField, sym: np.ndarray):
    if v.spec != op.spec:
        raise ValueError(f"band spec mismatch: operator {op.spec} vs field {v.spec}")
    return v._like(v.coeffs * sym)


def apply_L(op: SmoothingOperator, v: FreqVectorField) -> FreqVectorField:
    return _apply_symbol(op, v, op.lcoeffs)


def apply_K(op: SmoothingOperator, m: FreqVectorField) -> FreqVectorField:
    return _apply_symbol(op, m, op.kcoeffs)
