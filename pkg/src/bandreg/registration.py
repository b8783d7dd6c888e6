"""Shooting-energy minimization over the band-limited initial velocity."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .freq import BandSpec, FreqVectorField, SmoothingOperator, apply_K, inner, make_operator
from .shooting import IntegrationDiverged, det_jacobian, shoot, to_deformation, warp

log = logging.getLogger(__name__)


class EnergyDiverged(RuntimeError):
    pass


@dataclass
class RegConfig:
    gamma: float = 300.0
    alpha: float = 3.0
    power: int = 6
    band: int = 16
    grid: int | tuple = 100
    dim: int = 2
    steps: int = 10
    max_iters: int = 200
    step_size: float = 0.1
    tol: float = 1e-6
    fd_eps: float = 1e-6
    seed: int = 0
    precondition: bool = True
    chunk: int = 512

    def __post_init__(self):
        if isinstance(self.grid, list):
            self.grid = tuple(self.grid)
        for name in ("gamma", "alpha", "power", "band", "steps", "max_iters", "step_size", "chunk"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.tol < 1:
            raise ValueError(f"tol must lie in (0, 1), got {self.tol}")
        if not self.fd_eps > 0:
            raise ValueError(f"fd_eps must be positive, got {self.fd_eps}")
        self.spec  # validates dim, band and grid together

    @property
    def spec(self) -> BandSpec:
        return BandSpec(self.dim, self.band, self.grid)

    def operator(self) -> SmoothingOperator:
        return make_operator(self.alpha, self.power, self.spec)

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["grid"], tuple):
            d["grid"] = list(d["grid"])
        return d


@dataclass
class RegResult:
    v_opt: FreqVectorField
    energy_trace: list
    initial_ssd: float
    final_ssd: float
    min_detjac: float
    iterations: int
    converged: bool
    backtrack_exhausted: bool = False
    wall_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def diagnostics(self) -> dict:
        return {
            "initial_ssd": self.initial_ssd,
            "final_ssd": self.final_ssd,
            "min_detjac": self.min_detjac,
            "iterations": self.iterations,
            "converged": self.converged,
            "backtrack_exhausted": self.backtrack_exhausted,
            "final_energy": self.energy_trace[-1],
            "wall_s": self.wall_s,
        }


def ssd(a: np.ndarray, b: np.ndarray, dim: int | None = None) -> np.ndarray:
    """Voxel-mean squared difference over the trailing ``dim`` axes."""
    diff = np.asarray(a, float) - np.asarray(b, float)
    dim = diff.ndim if dim is None else dim
    return np.mean(diff ** 2, axis=tuple(range(-dim, 0)))


def regularizer(v0: FreqVectorField, op: SmoothingOperator) -> np.ndarray:
    return 0.5 * inner(v0, v0._like(v0.coeffs * op.lcoeffs))


def _check_images(S, T, cfg: RegConfig):
    spec = cfg.spec
    for name, img in (("source", S), ("target", T)):
        if np.shape(img) != spec.grid:
            raise ValueError(f"{name} image shape {np.shape(img)} does not match grid {spec.grid}")


def _energy_terms(v0: FreqVectorField, S, T, cfg: RegConfig, op: SmoothingOperator):
    try:
        path = shoot(v0, op, cfg.steps)
    except IntegrationDiverged as exc:
        raise EnergyDiverged(str(exc)) from exc
    psi = to_deformation(path.displacement, cfg.spec.grid)
    match = ssd(warp(S, psi), T, cfg.dim)
    return match, regularizer(v0, op), psi


def energy(v0: FreqVectorField, S, T, cfg: RegConfig, op: SmoothingOperator | None = None):
    """``gamma/2 * SSD(S o psi_1, T) + 1/2 <L v0, v0>``; vectorized over batch axes of ``v0``."""
    _check_images(S, T, cfg)
    op = cfg.operator() if op is None else op
    match, reg, _ = _energy_terms(v0, S, T, cfg, op)
    E = 0.5 * cfg.gamma * match + reg
    if not np.all(np.isfinite(E)):
        raise EnergyDiverged("energy is not finite")
    return float(E) if np.ndim(E) == 0 else E


class HermitianCoords:
    """Independent real coordinates of a Hermitian band vector field.

    Per component: the real DC coefficient, then real and imaginary parts of
    one representative of every conjugate pair ``(xi, -xi)``.
    """

    def __init__(self, spec: BandSpec):
        self.spec = spec
        f = spec.freqs()
        grids = np.meshgrid(*[f] * spec.dim, indexing="ij")
        xi = np.stack([g.ravel() for g in grids], axis=1)
        paired = np.all(xi > -spec.band // 2, axis=1)
        first = np.array([row[np.flatnonzero(row)[0]] if row.any() else 0 for row in xi])
        flat = np.ravel_multi_index(tuple((xi + spec.band // 2).T), spec.shape)
        self.dc = int(np.flatnonzero(~xi.any(axis=1))[0])
        self.pos = flat[paired & (first > 0)]
        neg_xi = -xi[paired & (first > 0)] + spec.band // 2
        self.neg = np.ravel_multi_index(tuple(neg_xi.T), spec.shape)
        self.per_component = 1 + 2 * len(self.pos)
        self.size = spec.dim * self.per_component

    def to_params(self, v: FreqVectorField) -> np.ndarray:
        c = v.coeffs.reshape(v.batch_shape + (self.spec.dim, -1))
        parts = [c[..., self.dc: self.dc + 1].real, c[..., self.pos].real, c[..., self.pos].imag]
        return np.concatenate(parts, axis=-1).reshape(v.batch_shape + (self.size,))

    def _split(self, p: np.ndarray):
        p = p.reshape(p.shape[:-1] + (self.spec.dim, self.per_component))
        n = len(self.pos)
        return p[..., 0], p[..., 1: 1 + n], p[..., 1 + n:]

    def to_field(self, p: np.ndarray) -> FreqVectorField:
        dc, re, im = self._split(np.asarray(p, float))
        c = np.zeros(p.shape[:-1] + (self.spec.dim, int(np.prod(self.spec.shape))), complex)
        c[..., self.dc] = dc
        c[..., self.pos] = re + 1j * im
        c[..., self.neg] = re - 1j * im
        return FreqVectorField(self.spec, c.reshape(p.shape[:-1] + (self.spec.dim,) + self.spec.shape))

    def gradient_field(self, g: np.ndarray) -> FreqVectorField:
        """Field ``G`` with ``<G, h> = g . dp(h)`` under the coefficientwise pairing."""
        dc, re, im = self._split(np.asarray(g, float))
        return self.to_field(np.concatenate([dc[..., None], re / 2, im / 2], axis=-1)
                             .reshape(g.shape))


def gradient_fd(v0: FreqVectorField, S, T, cfg: RegConfig, op: SmoothingOperator | None = None,
                coords: HermitianCoords | None = None) -> FreqVectorField:
    """Central finite differences of the energy in Hermitian-reduced coordinates."""
    if not cfg.fd_eps > 0:
        raise ValueError(f"fd_eps must be positive, got {cfg.fd_eps}")
    _check_images(S, T, cfg)
    op = cfg.operator() if op is None else op
    coords = HermitianCoords(v0.spec) if coords is None else coords
    p0 = coords.to_params(v0)
    n = coords.size
    eye = np.eye(n) * cfg.fd_eps
    probes = np.concatenate([p0 + eye, p0 - eye])
    E = np.concatenate([
        np.atleast_1d(energy(coords.to_field(probes[i: i + cfg.chunk]), S, T, cfg, op))
        for i in range(0, 2 * n, cfg.chunk)
    ])
    g = (E[:n] - E[n:]) / (2 * cfg.fd_eps)
    return coords.gradient_field(g)


def register(S, T, cfg: RegConfig, v_init: FreqVectorField | None = None) -> RegResult:
    """Gradient descent with backtracking on the shooting energy.

    Each iteration tries twice the last accepted step and halves it (at most
    30 times) until the energy decreases. With ``cfg.precondition`` the
    descent direction is ``-K grad``, i.e. the gradient under the smoothing
    metric rather than the flat coefficient one.
    """
    t0 = time.perf_counter()
    S = np.asarray(S, float)
    T = np.asarray(T, float)
    _check_images(S, T, cfg)
    spec = cfg.spec
    op = cfg.operator()
    coords = HermitianCoords(spec)
    v = FreqVectorField.zeros(spec) if v_init is None else v_init
    E = energy(v, S, T, cfg, op)
    trace = [E]
    step = cfg.step_size / 2
    converged = exhausted = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        if E == 0.0:
            # global minimum; the FD gradient is only O(fd_eps) here because of interpolation kinks
            converged = True
            break
        G = gradient_fd(v, S, T, cfg, op, coords)
        if G.norm() == 0.0:
            converged = True
            break
        direction = -(apply_K(op, G) if cfg.precondition else G)
        step *= 2
        for _ in range(31):
            trial = v + step * direction
            try:
                E_trial = energy(trial, S, T, cfg, op)
            except EnergyDiverged:
                E_trial = np.inf
            if E_trial < E:
                break
            step /= 2
        else:
            exhausted = True
            log.warning("backtracking exhausted at iteration %d (energy %.6g)", it, E)
            break
        rel = (E - E_trial) / E
        v, E = trial, E_trial
        trace.append(E)
        if rel < cfg.tol:
            converged = True
            break
    match, _, psi = _energy_terms(v, S, T, cfg, op)
    return RegResult(
        v_opt=v,
        energy_trace=trace,
        initial_ssd=float(ssd(S, T)),
        final_ssd=float(match),
        min_detjac=float(det_jacobian(psi).min()),
        iterations=it,
        converged=converged,
        backtrack_exhausted=exhausted,
        wall_s=time.perf_counter() - t0,
    )
