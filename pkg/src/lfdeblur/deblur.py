"""Blind deconvolution of motion-blurred light-field images.

Texture and motion kernels are estimated by projected alternating gradient
descent on

    E(f, h) = sum_i 1/2 || w_i M (A h_i * f - l) ||^2 + lam TV(f)
              + lam_p / 4 sum_i sum_{k in N(i)} || h_i - h_k ||^2

with ``A`` any observation model exposing ``observe``/``observe_adjoint``
(the LF chain of :mod:`lfdeblur.forward` or a plain image for the baseline).
Each round takes one texture step, then one kernel step followed by
clamping and unit-sum normalisation.  A coarse-to-fine pyramid runs the
rounds on successively finer texture grids, and a final pass re-solves the
texture alone with a lighter TV weight.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.ndimage import zoom

from .forward import motion_convolve, motion_convolve_adjoint, motion_kernel_adjoint
from .psf import DegenerateKernelError, project_kernel

__all__ = [
    "DeblurConfig",
    "DeblurProblem",
    "DeblurResult",
    "DeblurState",
    "DivergenceError",
    "blind_deconvolve",
    "build_pyramid",
    "deconvolve_known_kernel",
    "delta_kernel",
    "tv_gradient",
    "tv_value",
    "update_kernel",
    "update_texture",
]

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """The objective kept increasing; ``trace`` holds the data terms so far."""

    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


@dataclass
class DeblurConfig:
    """Solver settings.

    ``step`` and ``kernel_step`` are relative step sizes: a gradient step
    moves the largest entry by that fraction of the current maximum value.
    Both are halved whenever a round increases the objective.
    """

    lambda_alt: float = 1.6e-3
    lambda_final: float = 7e-4
    lambda_p: float = 4000.0
    step: float = 5e-3
    kernel_step: float = 1e-3
    iters_per_level: int = 300
    pyramid_levels: int = 3
    kernel_extent: tuple = (9, 9)
    tv_epsilon: float = 1e-3
    init_iters: int = 100
    final_iters: int = 200
    divergence_patience: int = 10

    def __post_init__(self):
        self.kernel_extent = tuple(int(k) for k in np.broadcast_to(self.kernel_extent, 2))
        if min(self.lambda_alt, self.lambda_final, self.lambda_p) < 0:
            raise ValueError("regularisation weights must be >= 0")
        if not (self.step > 0 and self.kernel_step > 0):
            raise ValueError("step sizes must be > 0")
        if any(k % 2 == 0 or k < 1 for k in self.kernel_extent):
            raise ValueError(f"kernel_extent must be odd, got {self.kernel_extent}")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")

    @classmethod
    def noise_free(cls, **kw) -> "DeblurConfig":
        return cls(**{"lambda_alt": 1.6e-3, "lambda_final": 7e-4, **kw})

    @classmethod
    def noisy(cls, **kw) -> "DeblurConfig":
        return cls(**{"lambda_alt": 2e-3, "lambda_final": 8e-4, **kw})

    @classmethod
    def real(cls, **kw) -> "DeblurConfig":
        return cls(**{"lambda_alt": 1.6e-3, "lambda_final": 4e-4, **kw})

    def replace(self, **kw) -> "DeblurConfig":
        return replace(self, **kw)


@dataclass
class DeblurResult:
    texture: np.ndarray
    kernels: list
    energy_trace: list = field(default_factory=list)
    level_sizes: list = field(default_factory=list)


@dataclass
class DeblurState:
    texture: np.ndarray
    kernels: list
    step: float
    kernel_step: float


# --------------------------------------------------------------------------
# total variation


def _grad(f):
    dx = np.zeros_like(f)
    dy = np.zeros_like(f)
    dx[:, :-1] = f[:, 1:] - f[:, :-1]
    dy[:-1, :] = f[1:, :] - f[:-1, :]
    return dx, dy


def tv_value(f: np.ndarray, eps: float = 1e-3) -> float:
    """Smoothed isotropic TV with forward differences (Neumann border)."""
    dx, dy = _grad(f)
    return float(np.sqrt(dx * dx + dy * dy + eps * eps).sum())


def tv_gradient(f: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Gradient of :func:`tv_value`, i.e. ``-div(grad f / |grad f|_eps)``."""
    dx, dy = _grad(f)
    n = np.sqrt(dx * dx + dy * dy + eps * eps)
    px = dx / n
    py = dy / n
    out = np.zeros_like(f)
    out[:, :-1] -= px[:, :-1]
    out[:, 1:] += px[:, :-1]
    out[:-1, :] -= py[:-1, :]
    out[1:, :] += py[:-1, :]
    return out


def delta_kernel(extent) -> np.ndarray:
    k = np.zeros(tuple(np.broadcast_to(extent, 2)))
    k[k.shape[0] // 2, k.shape[1] // 2] = 1.0
    return k


# --------------------------------------------------------------------------
# energy and gradients


class DeblurProblem:
    """Objective for one observation model and data set.

    ``model`` is a :class:`~lfdeblur.forward.ForwardModel` or
    :class:`~lfdeblur.forward.PlanarModel` (possibly coarsened).
    """

    def __init__(self, model, data: np.ndarray, lambda_tv: float = 0.0,
                 lambda_p: float = 0.0, tv_epsilon: float = 1e-3):
        self.model = model
        self.data = np.asarray(data, dtype=float)
        if self.data.shape != tuple(model.raw_shape):
            raise ValueError(f"data extent {self.data.shape} != {model.raw_shape}")
        self.lambda_tv = lambda_tv
        self.lambda_p = lambda_p
        self.tv_epsilon = tv_epsilon
        self.weights = model.residual_weights
        self.n_patches = model.patches.count
        self._lipschitz = {}

    def with_lambda(self, lambda_tv) -> "DeblurProblem":
        p = DeblurProblem(self.model, self.data, lambda_tv, self.lambda_p, self.tv_epsilon)
        p._lipschitz = self._lipschitz
        return p

    def kernel_list(self, kernels):
        if isinstance(kernels, np.ndarray) and kernels.ndim == 2:
            return [kernels] * self.n_patches
        return list(kernels)

    def backprojected(self, f, kernels):
        """Data term and ``A^T (w M r)`` per patch, on the blurred-texture grid."""
        kernels = self.kernel_list(kernels)
        data = 0.0
        back = []
        for w, h in zip(self.weights, kernels):
            r = self.model.observe(motion_convolve(f, h)) - self.data
            wr = w * r
            data += 0.5 * float(np.sum(wr * r))
            back.append(self.model.observe_adjoint(wr))
        return data, back

    def data_term(self, f, kernels) -> float:
        kernels = self.kernel_list(kernels)
        total = 0.0
        for w, h in zip(self.weights, kernels):
            r = self.model.observe(motion_convolve(f, h)) - self.data
            total += 0.5 * float(np.sum(w * r * r))
        return total

    def similarity(self, kernels) -> float:
        if self.lambda_p == 0 or self.n_patches == 1:
            return 0.0
        kernels = self.kernel_list(kernels)
        s = 0.0
        for i in range(self.n_patches):
            for k in self.model.patches.neighbors(i):
                s += float(np.sum((kernels[i] - kernels[k]) ** 2))
        return 0.25 * self.lambda_p * s

    def energy(self, f, kernels) -> float:
        return self.energy_from(self.data_term(f, kernels), f, kernels)

    def energy_from(self, data: float, f, kernels) -> float:
        """Full objective given an already evaluated data term."""
        e = data + self.similarity(kernels)
        if self.lambda_tv:
            e += self.lambda_tv * tv_value(f, self.tv_epsilon)
        return e

    def texture_gradient(self, f, kernels, back=None) -> np.ndarray:
        kernels = self.kernel_list(kernels)
        if back is None:
            _, back = self.backprojected(f, kernels)
        g = np.zeros_like(f)
        for s, h in zip(back, kernels):
            g += motion_convolve_adjoint(s, h)
        if self.lambda_tv:
            g += self.lambda_tv * tv_gradient(f, self.tv_epsilon)
        return g

    def kernel_gradients(self, f, kernels, back=None) -> list:
        kernels = self.kernel_list(kernels)
        if back is None:
            _, back = self.backprojected(f, kernels)
        grads = []
        for i, (s, h) in enumerate(zip(back, kernels)):
            g = motion_kernel_adjoint(s, f, h.shape)
            if self.lambda_p and self.n_patches > 1:
                for k in self.model.patches.neighbors(i):
                    g = g + self.lambda_p * (h - kernels[k])
            grads.append(g)
        return grads

    def lipschitz(self, kernels, iters: int = 15, seed: int = 0) -> float:
        """Power-iteration estimate of ``||A||^2`` for the data term."""
        kernels = self.kernel_list(kernels)
        key = tuple(h.tobytes() for h in kernels)
        if key in self._lipschitz:
            return self._lipschitz[key]
        x = np.random.default_rng(seed).standard_normal(self.model.texture_shape)
        x /= np.linalg.norm(x)
        val = 1.0
        for _ in range(iters):
            y = np.zeros_like(x)
            for w, h in zip(self.weights, kernels):
                y += motion_convolve_adjoint(
                    self.model.observe_adjoint(w * self.model.observe(motion_convolve(x, h))), h)
            val = np.linalg.norm(y)
            if val == 0:
                break
            x = y / val
        self._lipschitz[key] = 1.05 * val
        return 1.05 * val

    def texture_lipschitz(self) -> float:
        """Upper bound on the texture-gradient Lipschitz constant.

        A feasible kernel has unit l1 norm, so blurring cannot raise the
        operator norm much above the delta-kernel value; the padding adds a
        small margin.
        """
        n = self.n_patches
        L = 1.2 * self.lipschitz([delta_kernel(1)] * n)
        if self.lambda_tv:
            L += 8.0 * self.lambda_tv / self.tv_epsilon
        return L


# --------------------------------------------------------------------------
# single updates


def _relative_step(x, g, rel):
    gmax = float(np.max(np.abs(g)))
    if not math.isfinite(gmax):
        raise DivergenceError("non-finite gradient; reduce the step size")
    if gmax == 0.0:
        return 0.0
    return rel * max(float(np.max(x)), 1e-12) / gmax


def update_texture(state: DeblurState, problem: DeblurProblem, back=None) -> np.ndarray:
    """One explicit gradient step on the texture, clamped to [0, 1].

    The relative step is capped at ``1/L`` of the smoothed objective so a
    single step cannot overshoot on the stiff TV term.
    """
    g = problem.texture_gradient(state.texture, state.kernels, back)
    tau = _relative_step(state.texture, g, state.step)
    tau = min(tau, 1.0 / problem.texture_lipschitz())
    return np.clip(state.texture - tau * g, 0.0, 1.0)


def update_kernel(state: DeblurState, problem: DeblurProblem, i: int | None = None,
                  back=None):
    """Gradient step plus projection for patch ``i`` (all patches if None).

    Neighbour kernels are read from ``state`` so all patches can be updated
    from the same previous round.
    """
    grads = problem.kernel_gradients(state.texture, state.kernels, back)
    idx = range(len(grads)) if i is None else [i]
    out = []
    for n in idx:
        h = state.kernels[n]
        g = grads[n]
        tau = _relative_step(h, g, state.kernel_step)
        try:
            out.append(project_kernel(h - tau * g))
        except DegenerateKernelError:
            log.warning("kernel %d collapsed, resetting to a delta", n)
            out.append(delta_kernel(h.shape))
    return out if i is None else out[0]


# --------------------------------------------------------------------------
# solvers


def deconvolve_known_kernel(model, data, kernels, lam: float, iters: int = 200,
                            f0=None, tv_epsilon: float = 1e-3) -> np.ndarray:
    """Texture-only solve for fixed kernels.

    Accelerated projected gradient on ``[0, 1]`` with step ``1/L``; the step
    is halved and momentum reset whenever the objective goes up.
    """
    problem = DeblurProblem(model, data, lam, 0.0, tv_epsilon)
    kernels = problem.kernel_list(kernels)
    L = problem.lipschitz(kernels)
    if lam:
        L += 8.0 * lam / tv_epsilon
    tau = 1.0 / L
    if f0 is None:
        f0 = np.full(model.texture_shape, 0.5)
    x = np.clip(np.asarray(f0, dtype=float), 0.0, 1.0)
    y = x.copy()
    t = 1.0
    e_prev = problem.energy(x, kernels)
    for _ in range(iters):
        g = problem.texture_gradient(y, kernels)
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient; reduce the step size")
        x_new = np.clip(y - tau * g, 0.0, 1.0)
        e_new = problem.energy(x_new, kernels)
        if e_new > e_prev:
            # restart from the last accepted point with a plain step
            tau *= 0.5
            y = x
            t = 1.0
            continue
        t_new = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        y = x_new + ((t - 1) / t_new) * (x_new - x)
        x, t, e_prev = x_new, t_new, e_new
    return x


def _level_extent(extent, level):
    s = 2 ** level
    return tuple(max(3, int(k / s) | 1) for k in extent)


@dataclass
class PyramidLevel:
    level: int
    model: object
    kernel_extent: tuple


def build_pyramid(model, cfg: DeblurConfig) -> list:
    """Problem stack from coarsest to finest.

    Level ``l`` uses a texture grid coarser by ``2**l`` against the same
    sensor data and a kernel extent shrunk by the same factor (at least 3).
    Levels whose texture grid would not divide evenly are dropped.
    """
    levels = []
    shape = model.texture_shape
    for lv in range(cfg.pyramid_levels):
        s = 2 ** lv
        if shape[0] % s or shape[1] % s or min(shape) // s < 4:
            break
        m = model if lv == 0 else model.coarsen(s)
        levels.append(PyramidLevel(lv, m, _level_extent(cfg.kernel_extent, lv)))
    return levels[::-1]


def _resize_kernel(h, extent):
    if h.shape == tuple(extent):
        return h
    z = zoom(h, (extent[0] / h.shape[0], extent[1] / h.shape[1]), order=1)
    out = np.zeros(extent)
    a0 = min(z.shape[0], extent[0])
    a1 = min(z.shape[1], extent[1])
    o0 = (extent[0] - a0) // 2
    o1 = (extent[1] - a1) // 2
    z0 = (z.shape[0] - a0) // 2
    z1 = (z.shape[1] - a1) // 2
    out[o0:o0 + a0, o1:o1 + a1] = z[z0:z0 + a0, z1:z1 + a1]
    try:
        return project_kernel(out)
    except DegenerateKernelError:
        return delta_kernel(extent)


def _upsample_texture(f, shape):
    """Pixel repetition, the same operator the coarse levels render with."""
    s0, s1 = shape[0] // f.shape[0], shape[1] // f.shape[1]
    return np.repeat(np.repeat(f, s0, axis=0), s1, axis=1)


def _alternate(problem: DeblurProblem, state: DeblurState, iters: int, trace: list,
               patience: int, callback=None, level=0):
    """Run alternating rounds in place on ``state``.

    Step control watches the texture sub-step, which is a plain gradient
    step and must not raise the objective.  The kernel sub-step clamps and
    renormalises, which is not a descent step by design (it is what moves
    the kernels away from the trivial delta), so it is not monitored.
    """
    rising = 0
    for it in range(iters):
        data, back = problem.backprojected(state.texture, state.kernels)
        trace.append(data)
        before = problem.energy_from(data, state.texture, state.kernels)
        if not math.isfinite(before):
            raise DivergenceError("objective is not finite", trace)
        f_new = update_texture(state, problem, back)
        after = problem.energy(f_new, state.kernels)
        if not math.isfinite(after):
            raise DivergenceError("objective is not finite", trace)
        if after > before:
            state.step *= 0.5
            state.kernel_step *= 0.5
            rising += 1
            if rising >= patience:
                raise DivergenceError(
                    f"objective increased {rising} consecutive rounds", trace)
        else:
            rising = 0
        state.texture = f_new
        state.kernels = update_kernel(state, problem)
        if callback is not None:
            callback(level, it, state)
    return state


def blind_deconvolve(model, data, cfg: DeblurConfig | None = None,
                     callback: Callable | None = None) -> DeblurResult:
    """Joint texture / motion-kernel estimation, coarse to fine.

    ``callback(level, iteration, state)`` is invoked after every round.
    """
    cfg = cfg or DeblurConfig()
    levels = build_pyramid(model, cfg)
    n_patch = model.patches.count
    trace: list = []
    state = None
    for lv in levels:
        problem = DeblurProblem(lv.model, data, cfg.lambda_alt, cfg.lambda_p,
                                cfg.tv_epsilon)
        if state is None:
            kernels = [delta_kernel(lv.kernel_extent) for _ in range(n_patch)]
            f0 = deconvolve_known_kernel(lv.model, data, kernels, cfg.lambda_alt,
                                         cfg.init_iters, tv_epsilon=cfg.tv_epsilon)
            state = DeblurState(f0, kernels, cfg.step, cfg.kernel_step)
        else:
            state = DeblurState(
                _upsample_texture(state.texture, lv.model.texture_shape),
                [_resize_kernel(h, lv.kernel_extent) for h in state.kernels],
                cfg.step, cfg.kernel_step)
        log.debug("level %d: texture %s, kernel %s", lv.level,
                  lv.model.texture_shape, lv.kernel_extent)
        state = _alternate(problem, state, cfg.iters_per_level, trace,
                           cfg.divergence_patience, callback, lv.level)

    fine = levels[-1].model
    texture = deconvolve_known_kernel(fine, data, state.kernels, cfg.lambda_final,
                                      cfg.final_iters, f0=state.texture,
                                      tv_epsilon=cfg.tv_epsilon)
    final = DeblurProblem(fine, data).data_term(texture, state.kernels)
    trace.append(final)
    return DeblurResult(texture, state.kernels, trace,
                        [lv.model.texture_shape for lv in levels])
