"""Forward corruption, reverse sampling, step plans, and constraint masks.

The generative process is a DDPM over layout tensors: the forward chain
adds Gaussian noise with a fixed schedule, x_t = sqrt(a_bar_t) x_0 +
sqrt(1 - a_bar_t) eps, and the learned model predicts eps so each reverse
step can reconstruct x_hat_0 and draw the previous state from the
forward-process posterior. Inference may subsample timesteps (uniform or
quad spacing), and known layout attributes can be frozen with a binary
mask (inpainting-style per-step re-noising of the reference).

All state here is float64 numpy; coefficients are plain floats so the
arithmetic also applies verbatim to torch tensors in the training loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .layout import Layout, LayoutTensor, detokenize, scale_to_unit, tokenize


class DiffusionError(ValueError):
    """Invalid schedule, step, plan, or mask input."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed schedule arrays, 1-indexed by timestep; index 0 is t=0.

    betas[0] = 0 and alpha_bars[0] = 1 by convention so that t=0 denotes
    clean data. sigma2 stores the simple per-step variance choice
    sigma_t^2 = beta_t; reverse_step draws from the forward-process
    posterior, whose variance it derives from alpha_bars directly.
    """

    T: int
    betas: np.ndarray  # (T+1,)
    alphas: np.ndarray  # (T+1,)
    alpha_bars: np.ndarray  # (T+1,)
    sigma2: np.ndarray  # (T+1,)
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if (self.betas[1:] <= 0).any() or (self.betas[1:] >= 1).any():
            raise DiffusionError("betas must lie in (0, 1)")
        if (np.diff(self.alpha_bars) >= 0).any():
            raise DiffusionError("alpha_bar must be strictly decreasing")

    def check_step(self, t: int):
        if not 1 <= t <= self.T:
            raise DiffusionError(f"timestep {t} outside [1, {self.T}]")


def make_schedule(
    T: int, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear"
) -> NoiseSchedule:
    """Linear beta schedule with running-product alpha_bar."""
    if T < 1:
        raise DiffusionError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise DiffusionError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if kind != "linear":
        raise DiffusionError(f"unknown schedule kind {kind!r}")
    betas = np.zeros(T + 1)
    betas[1:] = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(
        T=T,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        sigma2=betas.copy(),
        beta_start=beta_start,
        beta_end=beta_end,
    )


def forward_sample(x0, t: int, eps, sched: NoiseSchedule):
    """x_t = sqrt(a_bar_t) x_0 + sqrt(1 - a_bar_t) eps.

    Elementwise with scalar coefficients, so x0/eps may be numpy arrays
    or torch tensors of any matching shape.
    """
    sched.check_step(t)
    ab = float(sched.alpha_bars[t])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def posterior_coefficients(t_from: int, t_to: int, sched: NoiseSchedule):
    """(c0, c1, var) of q(x_to | x_from, x0) = N(c0 x0 + c1 x_from, var I).

    Valid for arbitrary jumps t_from > t_to >= 1; for adjacent steps this
    reduces to the textbook posterior with variance beta_tilde.
    """
    ab_from = float(sched.alpha_bars[t_from])
    ab_to = float(sched.alpha_bars[t_to])
    a_cur = ab_from / ab_to  # product of alphas over (t_to, t_from]
    c0 = math.sqrt(ab_to) * (1.0 - a_cur) / (1.0 - ab_from)
    c1 = math.sqrt(a_cur) * (1.0 - ab_to) / (1.0 - ab_from)
    var = (1.0 - ab_to) / (1.0 - ab_from) * (1.0 - a_cur)
    return c0, c1, var


def reverse_step(
    x_t,
    t_from: int,
    t_to: int,
    eps_hat,
    sched: NoiseSchedule,
    rng: np.random.Generator | None = None,
):
    """One reverse jump x_{t_from} -> x_{t_to}.

    Reconstructs x_hat_0 from the predicted noise, clamps it to [-1, 1],
    and samples the posterior; t_to = 0 returns x_hat_0 deterministically.
    """
    sched.check_step(t_from)
    if not 0 <= t_to < t_from:
        raise DiffusionError(f"need t_from > t_to >= 0, got {t_from} -> {t_to}")
    ab_from = float(sched.alpha_bars[t_from])
    x0_hat = (x_t - math.sqrt(1.0 - ab_from) * eps_hat) / math.sqrt(ab_from)
    x0_hat = np.clip(x0_hat, -1.0, 1.0)
    if t_to == 0:
        return x0_hat
    c0, c1, var = posterior_coefficients(t_from, t_to, sched)
    if rng is None:
        raise DiffusionError("rng required for stochastic steps (t_to > 0)")
    z = rng.standard_normal(np.shape(x_t))
    return c0 * x0_hat + c1 * x_t + math.sqrt(var) * z


@dataclass(frozen=True)
class TimestepPlan:
    steps: tuple[int, ...]  # strictly decreasing, first = T, last = 1
    mode: str

    def __post_init__(self):
        if not self.steps:
            raise DiffusionError("empty timestep plan")
        if any(b >= a for a, b in zip(self.steps, self.steps[1:])):
            raise DiffusionError(f"plan must be strictly decreasing, got {self.steps}")
        if self.steps[-1] != 1:
            raise DiffusionError(f"plan must end at 1, got {self.steps[-1]}")

    def pairs(self):
        """(t_from, t_to) jumps, final jump landing on 0."""
        targets = self.steps[1:] + (0,)
        return tuple(zip(self.steps, targets))


def make_plan(sched: NoiseSchedule, n_steps: int, mode: str = "uniform") -> TimestepPlan:
    """Inference-time subsequence of {1..T}, descending.

    uniform: evenly spaced rounds of T*k/n (constant gap for divisible
    T/n), tail forced to 1. quad: rounds of (i/n)^2 * T, denser near t=1,
    endpoints forced to T and 1.
    """
    T = sched.T
    if not 1 <= n_steps <= T:
        raise DiffusionError(f"n_steps must be in [1, {T}], got {n_steps}")
    if mode == "uniform":
        raw = [round(T * k / n_steps) for k in range(n_steps, 0, -1)]
    elif mode == "quad":
        raw = [round((i / n_steps) ** 2 * T) for i in range(n_steps, 0, -1)]
    else:
        raise DiffusionError(f"unknown plan mode {mode!r}")
    steps: list[int] = []
    for t in raw:
        if t >= 1 and (not steps or t < steps[-1]):
            steps.append(t)
    if steps[0] != T:
        steps.insert(0, T)
    if steps[-1] != 1:
        if len(steps) > 1:
            steps[-1] = 1
        else:
            steps.append(1)
    return TimestepPlan(steps=tuple(steps), mode=mode)


@dataclass(frozen=True)
class ConstraintMask:
    """Binary freeze mask over a layout tensor plus the reference values."""

    mask: np.ndarray  # (n_max, channels), 1 = attribute is given
    reference: LayoutTensor  # same shape, holds the frozen values

    def __post_init__(self):
        mask = np.asarray(self.mask)
        ref = np.asarray(self.reference, dtype=np.float64)
        if mask.shape != ref.shape:
            raise DiffusionError(f"mask shape {mask.shape} != reference shape {ref.shape}")
        if not np.isin(mask, (0, 1)).all():
            raise DiffusionError("mask entries must be 0 or 1")
        if not np.isfinite(ref[mask == 1]).all():
            raise DiffusionError("reference must be finite wherever mask = 1")
        object.__setattr__(self, "mask", mask.astype(np.float64))
        object.__setattr__(self, "reference", ref)


def task_mask(
    task: str,
    reference: LayoutTensor,
    n_categories: int,
    rng: np.random.Generator | None = None,
    keep_prob: float = 0.5,
) -> ConstraintMask | None:
    """Freeze pattern for each constrained generation task.

    c_to_sp: category block given, sizes and positions free.
    cs_to_p: category block plus (w, h) given, positions free.
    completion: a random subset of non-padding elements fully given
    (each kept with keep_prob, at least one when any exist).
    uncond: no mask.
    """
    reference = np.asarray(reference, dtype=np.float64)
    n_max, channels = reference.shape
    mask = np.zeros((n_max, channels))
    if task == "uncond":
        return None
    if task == "c_to_sp":
        mask[:, :n_categories] = 1.0
    elif task == "cs_to_p":
        mask[:, :n_categories] = 1.0
        mask[:, n_categories + 2 : n_categories + 4] = 1.0
    elif task == "completion":
        if rng is None:
            raise DiffusionError("completion mask requires an rng")
        nonpad = np.nonzero(reference[:, :n_categories].argmax(axis=1) != 0)[0]
        if nonpad.size:
            keep = nonpad[rng.random(nonpad.size) < keep_prob]
            if keep.size == 0:
                keep = nonpad[[rng.integers(nonpad.size)]]
            mask[keep, :] = 1.0
    else:
        raise DiffusionError(f"unknown task {task!r}")
    return ConstraintMask(mask=mask, reference=reference)


def _apply_mask_noisy(x, cm: ConstraintMask, t: int, sched: NoiseSchedule, rng):
    """Overwrite frozen entries with the reference diffused to level t."""
    noised_ref = forward_sample(cm.reference, t, rng.standard_normal(x.shape), sched)
    return np.where(cm.mask == 1, noised_ref, x)


def sample(
    model,
    bundle,
    plan: TimestepPlan,
    sched: NoiseSchedule,
    cats,
    mask: ConstraintMask | None = None,
    rng: np.random.Generator | None = None,
    return_tensor: bool = False,
) -> Layout:
    """Run the reverse chain from pure noise to a layout.

    model must expose layout_shape and predict_eps(x, t, bundle); frozen
    attributes (mask=1) track the forward marginal of the reference at
    every visited t and are restored exactly in the returned layout.
    With return_tensor the final tensor comes back alongside the layout,
    so exactness under a mask can be checked bitwise.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    shape = tuple(model.layout_shape)
    if mask is not None and mask.mask.shape != shape:
        raise DiffusionError(f"mask shape {mask.mask.shape} != model layout shape {shape}")
    x = rng.standard_normal(shape)
    for t_from, t_to in plan.pairs():
        if mask is not None:
            x = _apply_mask_noisy(x, mask, t_from, sched, rng)
        eps_hat = np.asarray(model.predict_eps(x, t_from, bundle), dtype=np.float64)
        if eps_hat.shape != shape:
            raise DiffusionError(f"model returned shape {eps_hat.shape}, expected {shape}")
        x = reverse_step(x, t_from, t_to, eps_hat, sched, rng)
    if mask is not None:
        x = np.where(mask.mask == 1, mask.reference, x)
    canvas_size = getattr(bundle, "canvas_size", (240, 160))
    layout = detokenize(x, cats, canvas_size=canvas_size)
    if return_tensor:
        return layout, x
    return layout


def perturb_layout(layout: Layout, rng: np.random.Generator, var: float = 0.01) -> Layout:
    """Jitter every box coordinate with N(0, var) in [0,1] space, clamped."""
    elements = []
    for el in layout.elements:
        if el.is_empty:
            elements.append(el)
            continue
        box = np.clip(np.asarray(el.box) + rng.normal(0.0, math.sqrt(var), 4), 0.0, 1.0)
        elements.append(type(el)(category=el.category, box=tuple(float(v) for v in box)))
    return Layout(elements=tuple(elements), canvas_size=layout.canvas_size)


def refine_start_step(sched: NoiseSchedule, var: float = 0.01) -> int:
    """Smallest t whose accumulated noise covers a [0,1]-space variance.

    The factor 4 rescales the variance to the [-1,1] diffusion domain.
    """
    target = 4.0 * var
    idx = np.nonzero(1.0 - sched.alpha_bars[1:] >= target)[0]
    if idx.size == 0:
        return sched.T
    return int(idx[0]) + 1


def refine(
    model,
    bundle,
    noisy_layout: Layout,
    sched: NoiseSchedule,
    cats,
    rng: np.random.Generator | None = None,
    n_max: int | None = None,
    var: float = 0.01,
) -> Layout:
    """Treat a perturbed layout as a mid-chain state and denoise it.

    The layout is tokenized, scaled by sqrt(a_bar_{t*}) so its magnitude
    matches the forward marginal at t*, and the reverse loop runs from t*
    down to 0 with every intermediate step visited. No training happens.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if n_max is None:
        n_max = model.layout_shape[0]
    t_star = refine_start_step(sched, var)
    x = tokenize(noisy_layout, cats, n_max=n_max) * math.sqrt(float(sched.alpha_bars[t_star]))
    for t_from in range(t_star, 0, -1):
        eps_hat = np.asarray(model.predict_eps(x, t_from, bundle), dtype=np.float64)
        x = reverse_step(x, t_from, t_from - 1, eps_hat, sched, rng)
    canvas_size = getattr(bundle, "canvas_size", noisy_layout.canvas_size)
    return detokenize(x, cats, canvas_size=canvas_size)
