"""Posterior sampling for masked, noisy slice observations.

The forward model is linear masking: some pixels' channels are observed
(possibly with Gaussian noise), the rest are hidden. Reconstruction draws
samples from the diffusion posterior with a particle filter (FPS-SMC): every
particle runs the learned reverse process, observed coordinates fuse the
reverse kernel with a forward-diffused observation path, and importance
weights with systematic resampling keep the ensemble on the posterior. A
simple replacement sampler serves as the ablation baseline.

All math here is numpy; the noise predictor is any callable
eps_fn(x (B, H, W, C), t) -> (B, H, W, C) such as diffusion.TorchEpsAdapter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule
from .errors import ConfigError, NumericalDivergenceError

__all__ = [
    "MaskSpec",
    "parse_mask_spec",
    "ModalityLayout",
    "MaskingOperator",
    "Observation",
    "make_observation",
    "SolverConfig",
    "ReconstructionSet",
    "fps_smc_sample",
    "fps_smc_batch",
    "replacement_sample",
    "reconstruct_set",
]

TAU2 = 1e-4


@dataclass(frozen=True)
class MaskSpec:
    """Which pixels of a masked modality are observed.

    kind "random" observes each pixel independently with probability param;
    "grid" observes pixels whose row and column are both multiples of the
    integer param (stride); "none" observes nothing.
    """

    kind: str
    param: float = 0.0

    def describe(self):
        if self.kind == "none":
            return "none"
        value = int(self.param) if self.kind == "grid" else self.param
        return f"{self.kind}({value})"


def parse_mask_spec(text) -> MaskSpec:
    """Parse 'random(p)', 'grid(s)', or 'none'."""
    if isinstance(text, MaskSpec):
        return text
    text = str(text).strip().lower()
    if text == "none":
        return MaskSpec("none")
    if "(" not in text or not text.endswith(")"):
        raise ConfigError(f"malformed mask spec {text!r}")
    kind, arg = text[:-1].split("(", 1)
    kind = kind.strip()
    if kind == "random":
        p = float(arg)
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"random mask probability {p} outside [0, 1]")
        return MaskSpec("random", p)
    if kind == "grid":
        stride = int(float(arg))
        if stride < 1:
            raise ConfigError(f"grid stride must be >= 1, got {stride}")
        return MaskSpec("grid", stride)
    raise ConfigError(f"unknown mask spec kind {kind!r}")


@dataclass(frozen=True)
class ModalityLayout:
    """Which channels belong to which modality."""

    ebsd: tuple = ()
    pl: tuple = ()

    @property
    def n_channels(self):
        return len(self.ebsd) + len(self.pl)

    @classmethod
    def multimodal(cls):
        return cls(ebsd=(0, 1, 2), pl=(3, 4, 5))

    @classmethod
    def ebsd_only(cls):
        return cls(ebsd=(0, 1, 2), pl=())

    @classmethod
    def pl_only(cls):
        return cls(ebsd=(), pl=(0, 1, 2))

    @classmethod
    def named(cls, name):
        try:
            return {
                "ep": cls.multimodal(),
                "e": cls.ebsd_only(),
                "p": cls.pl_only(),
            }[str(name).lower()]
        except KeyError:
            raise ConfigError(f"unknown modality layout {name!r}") from None


class MaskingOperator:
    """Linear coordinate selection over an (H, W, C) grid.

    apply picks the observed coordinates as a flat vector (row-major scan
    order); scatter is the adjoint, placing a flat vector back on the grid
    with zeros elsewhere.
    """

    def __init__(self, mask):
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim != 3:
            raise ConfigError(f"mask must be (H, W, C), got shape {mask.shape}")
        self.mask = mask
        self.flat_index = np.flatnonzero(mask.ravel())

    @property
    def shape(self):
        return self.mask.shape

    @property
    def n_observed(self):
        return self.flat_index.size

    def apply(self, x):
        x = np.asarray(x)
        return x.reshape(*x.shape[:-3], -1)[..., self.flat_index]

    def scatter(self, values):
        values = np.asarray(values)
        lead = values.shape[:-1]
        out = np.zeros(lead + (self.mask.size,), dtype=values.dtype)
        out[..., self.flat_index] = values
        return out.reshape(lead + self.mask.shape)

    def coords(self):
        """Observed (row, col, channel) triples, scan order."""
        return np.argwhere(self.mask)


def _pixel_mask(spec: MaskSpec, height, width, rng):
    if spec.kind == "none":
        return np.zeros((height, width), dtype=bool)
    if spec.kind == "random":
        if spec.param == 0.0:
            return np.zeros((height, width), dtype=bool)
        if rng is None:
            raise ConfigError("random mask requires an rng")
        return rng.uniform(size=(height, width)) < spec.param
    if spec.kind == "grid":
        stride = int(spec.param)
        mask = np.zeros((height, width), dtype=bool)
        mask[::stride, ::stride] = True
        return mask
    raise ConfigError(f"unknown mask spec kind {spec.kind!r}")


@dataclass
class Observation:
    """A masked, possibly noisy view of one slice.

    values holds Y on the observed coordinates (operator scan order);
    sigma_y is the measurement noise level the solver should assume;
    layout records which channels carry which modality.
    """

    operator: MaskingOperator
    values: np.ndarray
    sigma_y: float
    layout: ModalityLayout
    ebsd_pixel_mask: np.ndarray = None

    def __post_init__(self):
        if self.values.shape != (self.operator.n_observed,):
            raise ConfigError(
                f"got {self.values.shape[0] if self.values.ndim else 0} values "
                f"for {self.operator.n_observed} observed coordinates"
            )

    @property
    def shape(self):
        return self.operator.shape

    @property
    def n_observed(self):
        return self.operator.n_observed

    def scattered(self):
        """Y placed on the full grid, zeros elsewhere."""
        return self.operator.scatter(self.values)


def make_observation(sample, mask_spec, sigma_y, rng=None,
                     layout: ModalityLayout = None) -> Observation:
    """Build the observation of a ground-truth slice.

    The mask spec drives which EBSD pixels are observed (a pixel is observed
    in all EBSD channels or none). PL channels, when the layout has them,
    are always fully observed. Y is the selected true values plus
    sigma_y-scaled Gaussian noise. rng consumption order: the random-mask
    draw (if any), then the value noise (if sigma_y > 0).
    """
    sample = np.asarray(sample, dtype=np.float64)
    if sample.ndim != 3:
        raise ConfigError(f"sample must be (H, W, C), got shape {sample.shape}")
    h, w, c = sample.shape
    if layout is None:
        layout = (
            ModalityLayout.multimodal() if c == 6 else ModalityLayout.ebsd_only()
        )
    if layout.n_channels != c:
        raise ConfigError(
            f"layout covers {layout.n_channels} channels, sample has {c}"
        )
    if sigma_y < 0:
        raise ConfigError(f"sigma_y must be >= 0, got {sigma_y}")
    spec = parse_mask_spec(mask_spec)
    pixel_mask = _pixel_mask(spec, h, w, rng)

    mask = np.zeros((h, w, c), dtype=bool)
    for ch in layout.ebsd:
        mask[:, :, ch] = pixel_mask
    for ch in layout.pl:
        mask[:, :, ch] = True

    operator = MaskingOperator(mask)
    values = operator.apply(sample)
    if sigma_y > 0:
        if rng is None:
            raise ConfigError("sigma_y > 0 requires an rng")
        values = values + sigma_y * rng.standard_normal(values.shape)
    return Observation(
        operator=operator,
        values=values,
        sigma_y=float(sigma_y),
        layout=layout,
        ebsd_pixel_mask=pixel_mask,
    )


@dataclass
class SolverConfig:
    """Knobs of a reconstruction run.

    method selects the sampler; n_particles is the FPS-SMC ensemble size;
    n_steps subsamples the schedule when smaller than its length;
    ess_fraction triggers resampling when the effective sample size drops
    under ess_fraction * K; tau2 is the variance floor that keeps exact
    observations numerically benign; eps_batch bounds how many particles go
    through the noise predictor per call.
    """

    method: str = "fps-smc"
    n_particles: int = 10
    n_steps: int = None
    variance: str = "beta"
    ess_fraction: float = 0.5
    tau2: float = TAU2
    seed: int = 0
    eps_batch: int = 128

    def describe(self):
        return (
            f"{self.method}(K={self.n_particles}, steps={self.n_steps or 'full'})"
        )


@dataclass
class ReconstructionSet:
    """N posterior samples of one observation plus their seeds."""

    samples: np.ndarray
    observation: Observation
    seeds: np.ndarray
    method: str = "fps-smc"

    @property
    def n(self):
        return self.samples.shape[0]

    def mean_reconstruction(self):
        """Pixel-wise mean over the set (the X-bar aggregate)."""
        return self.samples.mean(axis=0)

    def pixel_variance(self):
        """Pixel-wise variance over the set; near zero where observed
        exactly, larger where the posterior is genuinely uncertain."""
        return self.samples.var(axis=0)


def _chunked_eps(eps_fn, x, t, batch):
    n = x.shape[0]
    if n <= batch:
        return np.asarray(eps_fn(x, t), dtype=np.float64)
    out = np.empty_like(x)
    for start in range(0, n, batch):
        out[start : start + batch] = eps_fn(x[start : start + batch], t)
    return out


def _as_eps_fn(model, schedule):
    """Accept a raw eps callable or anything exposing eps_fn(schedule)."""
    if hasattr(model, "eps_fn"):
        return model.eps_fn(schedule)
    if callable(model):
        return model
    raise ConfigError("model must be callable or expose eps_fn(schedule)")


def _systematic_resample(weights, u):
    k = weights.shape[0]
    positions = (np.arange(k) + u) / k
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    return np.minimum(np.searchsorted(cumulative, positions), k - 1)


class _DrawPool:
    """Uniform draw interface over one shared rng or one rng per set.

    A single generator vectorizes draws across sets (fast for thousands of
    lockstep reconstructions); a list of generators keeps every set's draw
    sequence private so one set rerun alone with its seed is bit-identical.
    """

    def __init__(self, rng_or_rngs, n_sets):
        if isinstance(rng_or_rngs, (list, tuple)):
            if len(rng_or_rngs) != n_sets:
                raise ConfigError(
                    f"got {len(rng_or_rngs)} generators for {n_sets} sets"
                )
            self.rngs = list(rng_or_rngs)
            self.shared = None
        else:
            self.shared = rng_or_rngs
            self.rngs = None

    def normal(self, per_set_shape, n_sets):
        if self.shared is not None:
            return self.shared.standard_normal((n_sets,) + per_set_shape)
        return np.stack(
            [rng.standard_normal(per_set_shape) for rng in self.rngs]
        )

    def resample_uniforms(self, set_indices):
        if self.shared is not None:
            return self.shared.uniform(size=len(set_indices))
        return np.array([self.rngs[s].uniform() for s in set_indices])

    def selection_uniforms(self, n_sets):
        if self.shared is not None:
            return self.shared.uniform(size=n_sets)
        return np.array([rng.uniform() for rng in self.rngs])


def fps_smc_batch(model, schedule: NoiseSchedule, observation: Observation,
                  n_particles, rng, n_sets, variance="beta",
                  ess_fraction=0.5, tau2=TAU2, eps_batch=128,
                  callback=None):
    """Run n_sets independent FPS-SMC reconstructions in lockstep.

    Per reconstruction: one eta noises the observation into a path
    y_t = sqrt(ab_t) Y + sqrt(1 - ab_t) eta; K particles follow the reverse
    process; each step weights particles by the predictive likelihood of
    y_{t-1}, resamples systematically when the effective sample size falls
    below ess_fraction * K, then proposes: unobserved coordinates take the
    plain reverse step, observed coordinates the precision-weighted fusion
    of the reverse kernel N(mu, sigma_t^2) and the observation Gaussian
    N(y_{t-1}, rho_t^2), rho_t^2 = ab_{t-1} sigma_y^2 + tau2. The final
    answer per set is one particle drawn by final weights.

    rng is a single Generator (draws vectorized across sets) or a list of
    one Generator per set (each set's draw sequence is self-contained).
    Per-set draw order: eta (skipped when nothing is observed), initial
    state, then per step any resampling uniform followed by the step noise
    (skipped at t = 1), and finally one selection uniform (skipped when
    K = 1).

    callback, when given, is called as callback(t, states, weights) after
    each step with states (n_sets, K, H, W, C) and weights (n_sets, K).

    Returns (n_sets, H, W, C).
    """
    if n_particles < 1:
        raise ConfigError(f"n_particles must be >= 1, got {n_particles}")
    if n_sets < 1:
        raise ConfigError(f"n_sets must be >= 1, got {n_sets}")
    eps_fn = _as_eps_fn(model, schedule)
    pool = _DrawPool(rng, n_sets)
    h, w, c = observation.shape
    k = int(n_particles)
    n_obs = observation.n_observed
    flat_idx = observation.operator.flat_index
    y = observation.values
    sigma_y = observation.sigma_y

    if n_obs > 0:
        eta = pool.normal((n_obs,), n_sets)
    x = pool.normal((k, h, w, c), n_sets)
    log_w = np.full((n_sets, k), -np.log(k))

    for t in range(schedule.n_steps, 0, -1):
        beta = schedule.betas[t - 1]
        ab = schedule.alpha_bars[t - 1]
        ab_prev = float(schedule.alpha_bar_prev(t))
        sigma_t = float(schedule.sigma(t, variance))

        eps = _chunked_eps(
            eps_fn, x.reshape(n_sets * k, h, w, c), t, eps_batch
        ).reshape(n_sets, k, h, w, c)
        mu = (x - beta / np.sqrt(1.0 - ab) * eps) / np.sqrt(1.0 - beta)

        if n_obs > 0:
            y_prev = np.sqrt(ab_prev) * y + np.sqrt(1.0 - ab_prev) * eta
            rho2 = ab_prev * sigma_y**2 + tau2
            mu_obs = mu.reshape(n_sets, k, -1)[:, :, flat_idx]
            var_w = sigma_t**2 + rho2
            with np.errstate(over="ignore"):
                # An overflowing residual drives the weight to zero; the
                # finiteness check below turns a full collapse into a
                # diagnostic instead of silent nonsense.
                log_w = log_w - 0.5 * np.sum(
                    (y_prev[:, None, :] - mu_obs) ** 2 / var_w
                    + np.log(2.0 * np.pi * var_w),
                    axis=2,
                )
            shift = log_w.max(axis=1, keepdims=True)
            if not np.all(np.isfinite(shift)):
                raise NumericalDivergenceError(
                    f"particle weights collapsed to zero at step {t}; the "
                    "observation is irreconcilable with the model"
                )
            log_w = log_w - (
                shift + np.log(np.exp(log_w - shift).sum(axis=1, keepdims=True))
            )
            weights = np.exp(log_w)
            ess = 1.0 / np.sum(weights**2, axis=1)
            needs = np.flatnonzero(ess < ess_fraction * k)
            if needs.size and k > 1:
                uniforms = pool.resample_uniforms(needs)
                for u, s in zip(uniforms, needs):
                    picks = _systematic_resample(weights[s], u)
                    x[s] = x[s, picks]
                    mu[s] = mu[s, picks]
                    mu_obs[s] = mu_obs[s, picks]
                    log_w[s] = -np.log(k)

        if t > 1:
            z = pool.normal((k, h, w, c), n_sets)
        else:
            z = np.zeros_like(x)
        x = mu + sigma_t * z

        if n_obs > 0:
            denom = sigma_t**2 + rho2
            fused_mean = (rho2 * mu_obs + sigma_t**2 * y_prev[:, None, :]) / denom
            fused_std = np.sqrt(sigma_t**2 * rho2 / denom)
            if t == 1 and sigma_y == 0.0:
                # Exact measurement: the zero-noise posterior pins the
                # observed coordinates to Y itself.
                fused_mean = np.broadcast_to(y, mu_obs.shape)
                fused_std = 0.0
            flat = x.reshape(n_sets, k, -1)
            flat[:, :, flat_idx] = (
                fused_mean
                + fused_std * z.reshape(n_sets, k, -1)[:, :, flat_idx]
            )
            x = flat.reshape(n_sets, k, h, w, c)

        if not np.all(np.isfinite(x)):
            raise NumericalDivergenceError(
                f"particle states became non-finite at step {t}"
            )
        if callback is not None:
            callback(t, x, np.exp(log_w))

    if k == 1:
        return x[:, 0]
    weights = np.exp(log_w)
    uniforms = pool.selection_uniforms(n_sets)
    cumulative = np.cumsum(weights, axis=1)
    cumulative[:, -1] = 1.0
    picks = np.array(
        [
            min(int(np.searchsorted(cumulative[s], uniforms[s])), k - 1)
            for s in range(n_sets)
        ]
    )
    return x[np.arange(n_sets), picks]


def fps_smc_sample(model, schedule: NoiseSchedule, observation: Observation,
                   n_particles=10, rng=None, **kwargs):
    """One FPS-SMC reconstruction; see fps_smc_batch for the algorithm.

    With an empty observation and a single particle this reduces exactly to
    ancestral sampling, reproducing its draw sequence.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    return fps_smc_batch(
        model, schedule, observation, n_particles, rng, n_sets=1, **kwargs
    )[0]


def replacement_sample(model, schedule: NoiseSchedule,
                       observation: Observation, rng=None, variance="beta",
                       eps_batch=128, n_sets=1):
    """Baseline: plain reverse diffusion with observed coordinates
    overwritten by the forward-diffused observation after every step.

    The overwrite at step t - 1 is sqrt(ab_{t-1}) Y + sqrt(1 - ab_{t-1}) eta
    with one shared eta per reconstruction; the final overwrite (t - 1 = 0)
    uses Y itself. Draw order matches fps_smc_batch so the two samplers can
    be compared on identical randomness.

    Returns (H, W, C), or (n_sets, H, W, C) when n_sets > 1.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    eps_fn = _as_eps_fn(model, schedule)
    pool = _DrawPool(rng, n_sets)
    h, w, c = observation.shape
    n_obs = observation.n_observed
    flat_idx = observation.operator.flat_index
    y = observation.values

    if n_obs > 0:
        eta = pool.normal((n_obs,), n_sets)
    x = pool.normal((h, w, c), n_sets)

    for t in range(schedule.n_steps, 0, -1):
        beta = schedule.betas[t - 1]
        ab = schedule.alpha_bars[t - 1]
        ab_prev = float(schedule.alpha_bar_prev(t))
        sigma_t = float(schedule.sigma(t, variance))
        eps = _chunked_eps(eps_fn, x, t, eps_batch)
        mu = (x - beta / np.sqrt(1.0 - ab) * eps) / np.sqrt(1.0 - beta)
        if t > 1:
            x = mu + sigma_t * pool.normal((h, w, c), n_sets)
        else:
            x = mu
        if n_obs > 0:
            if t > 1:
                overwrite = np.sqrt(ab_prev) * y + np.sqrt(1.0 - ab_prev) * eta
            else:
                overwrite = np.broadcast_to(y, eta.shape)
            flat = x.reshape(n_sets, -1)
            flat[:, flat_idx] = overwrite
            x = flat.reshape(n_sets, h, w, c)
        if not np.all(np.isfinite(x)):
            raise NumericalDivergenceError(
                f"state became non-finite at step {t}"
            )
    return x if n_sets > 1 else x[0]


def reconstruct_set(model, schedule: NoiseSchedule, observation: Observation,
                    n=10, cfg: SolverConfig = None) -> ReconstructionSet:
    """Draw N independent reconstructions of one observation.

    Each reconstruction gets its own seed (cfg.seed + index) and a private
    generator, so any single element can be reproduced alone; the N chains
    still advance in lockstep so the noise predictor sees one batched call
    per step. Numerical problems in any chain fail the whole set.
    """
    cfg = cfg or SolverConfig()
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    sched = schedule
    if cfg.n_steps is not None and cfg.n_steps != schedule.n_steps:
        sched = schedule.subsample(cfg.n_steps)
    seeds = cfg.seed + np.arange(n, dtype=np.int64)
    rngs = [np.random.default_rng(int(s)) for s in seeds]
    if cfg.method == "fps-smc":
        samples = fps_smc_batch(
            model, sched, observation, cfg.n_particles, rngs, n_sets=n,
            variance=cfg.variance, ess_fraction=cfg.ess_fraction,
            tau2=cfg.tau2, eps_batch=cfg.eps_batch,
        )
    elif cfg.method == "replacement":
        samples = replacement_sample(
            model, sched, observation, rngs, variance=cfg.variance,
            eps_batch=cfg.eps_batch, n_sets=n,
        )
        samples = samples if n > 1 else samples[None]
    else:
        raise ConfigError(f"unknown solver method {cfg.method!r}")
    return ReconstructionSet(
        samples=samples, observation=observation, seeds=seeds,
        method=cfg.method,
    )
