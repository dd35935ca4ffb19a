"""Task heads over reconstruction sets.

Three consumers of posterior samples live here: grain-boundary prediction
(Sobel gradients of the PL channels, averaged over the set, thresholded at
an automatically found knee), grid super-resolution of the EBSD channels
(set mean corrected by a small per-pixel alignment net trained on the
observed pixels), and PL denoising (plain set mean). Each refuses inputs
that lack the modality it needs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError
from torch import nn

from .errors import ConfigError, UnsupportedTaskError
from .solver import Observation, ReconstructionSet

__all__ = [
    "SOBEL_X",
    "SOBEL_Y",
    "gradient_magnitude",
    "sobel_map",
    "aggregate_sobel",
    "knee_cutoff",
    "knee_threshold",
    "predict_boundaries",
    "AlignmentModel",
    "AlignmentResult",
    "align_field",
    "superresolve",
    "denoise_pl",
]

SOBEL_X = np.array(
    [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]
)
SOBEL_Y = SOBEL_X.T


def gradient_magnitude(image, mode="l2"):
    """Raw (unnormalized) Sobel gradient magnitude of a 2-d image.

    Accepts (H, W) or (H, W, C). Borders are edge-replicated. mode "l2"
    takes the L2 norm over all channels and both directions; "max" takes
    the per-channel L2 over directions, then the max over channels.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3:
        raise ConfigError(
            f"image must be (H, W) or (H, W, C), got shape {image.shape}"
        )
    gx2_gy2 = np.empty(image.shape, dtype=np.float64)
    for c in range(image.shape[2]):
        gx = ndimage.correlate(image[:, :, c], SOBEL_X, mode="nearest")
        gy = ndimage.correlate(image[:, :, c], SOBEL_Y, mode="nearest")
        gx2_gy2[:, :, c] = gx**2 + gy**2
    if mode == "l2":
        return np.sqrt(gx2_gy2.sum(axis=2))
    if mode == "max":
        return np.sqrt(gx2_gy2).max(axis=2)
    raise ConfigError(f"unknown gradient mode {mode!r}")


def sobel_map(image, mode="l2"):
    """Min-max normalized gradient magnitude in [0, 1].

    A constant image has no gradients anywhere and maps to all zeros.
    """
    raw = gradient_magnitude(image, mode)
    span = raw.max() - raw.min()
    if span < 1e-12:
        return np.zeros_like(raw)
    return (raw - raw.min()) / span


def aggregate_sobel(maps):
    """Element-wise mean of per-reconstruction gradient maps."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim == 2:
        maps = maps[None]
    if maps.size == 0 or maps.shape[0] == 0:
        raise ConfigError("cannot aggregate an empty set of gradient maps")
    return maps.mean(axis=0)


def knee_cutoff(sbar, sigma=50.0, truncate=3.0):
    """Threshold found at the knee of the sorted-descending value curve.

    The curve is smoothed with a normalized Gaussian (sigma in samples,
    radius truncate * sigma, edge-replicated), both axes are normalized to
    [0, 1], and the elbow is the first argmax of y(x) - (1 - x): the point
    where the curve's drop outpaces the diagonal. Returns the smoothed
    value there, or None when the curve is flat (max - min < 1e-9).
    """
    values = np.sort(np.asarray(sbar, dtype=np.float64).ravel())[::-1]
    smoothed = ndimage.gaussian_filter1d(
        values, sigma=sigma, mode="nearest", truncate=truncate
    )
    span = smoothed.max() - smoothed.min()
    if span < 1e-9:
        return None
    x = np.linspace(0.0, 1.0, smoothed.size)
    y_norm = (smoothed - smoothed.min()) / span
    elbow = int(np.argmax(y_norm - (1.0 - x)))
    return float(smoothed[elbow])


def knee_threshold(sbar, sigma=50.0, truncate=3.0):
    """Binary boundary map: the superlevel set of sbar at the knee cutoff."""
    sbar = np.asarray(sbar, dtype=np.float64)
    cutoff = knee_cutoff(sbar, sigma=sigma, truncate=truncate)
    if cutoff is None:
        return np.zeros(sbar.shape, dtype=np.uint8)
    return (sbar >= cutoff).astype(np.uint8)


def _pl_stack(recon):
    """PL channels of a reconstruction set or a raw PL image, as (N, H, W, C)."""
    if isinstance(recon, ReconstructionSet):
        pl = recon.observation.layout.pl
        if not pl:
            raise UnsupportedTaskError(
                "reconstruction set has no PL channels; this task needs them"
            )
        return recon.samples[:, :, :, list(pl)]
    arr = np.asarray(recon, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ConfigError(
            f"expected a reconstruction set or an (H, W, C) PL image, got "
            f"shape {arr.shape}"
        )
    return arr[None]


def predict_boundaries(recon, mode="l2", sigma=50.0):
    """Gradient-map boundary prediction.

    Sobel per reconstruction's PL channels, mean over the set, knee
    threshold. Also accepts a raw PL image directly, which is the N = 1
    baseline run on the observation itself. Returns (mean gradient map,
    binary boundary map).
    """
    stack = _pl_stack(recon)
    maps = [sobel_map(stack[i], mode=mode) for i in range(stack.shape[0])]
    sbar = aggregate_sobel(maps)
    return sbar, knee_threshold(sbar, sigma=sigma)


class AlignmentModel(BaseEstimator, RegressorMixin):
    """Per-pixel correction net mapping set-mean EBSD values to observed ones.

    Two linear layers with a GELU between them, so the map is applied to
    each pixel's channel vector independently and cannot mix neighbors.
    Training holds out val_fraction of the pairs, tracks validation MSE
    after every epoch, and keeps the best state. unaligned_val_mse_
    records the held-out MSE of the identity map for comparison.
    """

    def __init__(self, hidden=32, lr=0.02, batch_size=16, epochs=50,
                 val_fraction=0.2, seed=0):
        self.hidden = hidden
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.val_fraction = val_fraction
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim != 2 or y.shape != X.shape:
            raise ConfigError(
                f"expected matching (n, channels) arrays, got {X.shape} "
                f"and {y.shape}"
            )
        n, channels = X.shape
        if n < 2:
            raise ConfigError(f"need at least 2 pairs to split, got {n}")
        rng = np.random.default_rng(self.seed)
        perm = rng.permutation(n)
        n_val = max(1, int(round(self.val_fraction * n)))
        n_val = min(n_val, n - 1)
        val_idx, train_idx = perm[:n_val], perm[n_val:]

        torch.manual_seed(self.seed)
        net = nn.Sequential(
            nn.Linear(channels, self.hidden),
            nn.GELU(),
            nn.Linear(self.hidden, channels),
        )
        opt = torch.optim.Adam(net.parameters(), lr=self.lr)
        x_train = torch.as_tensor(X[train_idx], dtype=torch.float32)
        y_train = torch.as_tensor(y[train_idx], dtype=torch.float32)
        x_val = torch.as_tensor(X[val_idx], dtype=torch.float32)
        y_val = torch.as_tensor(y[val_idx], dtype=torch.float32)

        self.unaligned_val_mse_ = float(np.mean((X[val_idx] - y[val_idx]) ** 2))
        best_val = np.inf
        best_state = None
        n_train = train_idx.size
        for _ in range(self.epochs):
            order = rng.permutation(n_train)
            for start in range(0, n_train, self.batch_size):
                batch = order[start : start + self.batch_size]
                opt.zero_grad()
                loss = ((net(x_train[batch]) - y_train[batch]) ** 2).mean()
                loss.backward()
                opt.step()
            with torch.no_grad():
                val = float(((net(x_val) - y_val) ** 2).mean())
            if val < best_val:
                best_val = val
                best_state = {
                    k: v.detach().clone() for k, v in net.state_dict().items()
                }
        net.load_state_dict(best_state)
        net.eval()
        self.net_ = net
        self.val_mse_ = best_val
        self.val_indices_ = val_idx
        self.n_features_in_ = channels
        return self

    def predict(self, X):
        if not hasattr(self, "net_"):
            raise NotFittedError("AlignmentModel is not fitted")
        X = np.asarray(X, dtype=np.float64)
        lead = X.shape[:-1]
        flat = torch.as_tensor(
            X.reshape(-1, X.shape[-1]), dtype=torch.float32
        )
        with torch.no_grad():
            out = self.net_(flat).numpy().astype(np.float64)
        return out.reshape(lead + (X.shape[-1],))


@dataclass
class AlignmentResult:
    """Aligned EBSD field plus the bookkeeping of how it was produced."""

    field: np.ndarray
    trained: bool
    seed: int
    val_mse: float
    unaligned_val_mse: float
    n_observed: int
    model: AlignmentModel = field(default=None, repr=False)


def _ebsd_pixel_mask(observation: Observation):
    if observation.ebsd_pixel_mask is not None:
        return observation.ebsd_pixel_mask
    first = observation.layout.ebsd[0]
    return observation.operator.mask[:, :, first]


def align_field(xbar, observation: Observation, seed=0) -> AlignmentResult:
    """Correct a mean-reconstruction EBSD field against its observation.

    Trains the per-pixel net on {xbar[p] -> observed values[p]} over the
    observed pixels, applies the best net everywhere, and clamps to
    [-1, 1]. Under 10 observed pixels there is nothing to train on without
    overfitting the split, so the unaligned field comes back with a
    warning.
    """
    xbar = np.asarray(xbar, dtype=np.float64)
    if not observation.layout.ebsd:
        raise UnsupportedTaskError(
            "observation has no EBSD channels; nothing to align"
        )
    pixel_mask = _ebsd_pixel_mask(observation)
    n_pixels = int(pixel_mask.sum())
    if n_pixels < 10:
        warnings.warn(
            f"only {n_pixels} observed EBSD pixels; returning the unaligned "
            "field",
            stacklevel=2,
        )
        return AlignmentResult(
            field=np.clip(xbar, -1.0, 1.0), trained=False, seed=seed,
            val_mse=np.nan, unaligned_val_mse=np.nan, n_observed=n_pixels,
        )
    grid = observation.scattered()
    targets = grid[pixel_mask][:, list(observation.layout.ebsd)]
    inputs = xbar[pixel_mask]
    model = AlignmentModel(seed=seed).fit(inputs, targets)
    aligned = np.clip(model.predict(xbar), -1.0, 1.0)
    return AlignmentResult(
        field=aligned, trained=True, seed=seed, val_mse=model.val_mse_,
        unaligned_val_mse=model.unaligned_val_mse_, n_observed=n_pixels,
        model=model,
    )


def superresolve(recon_set: ReconstructionSet, observation: Observation = None,
                 seed=0) -> AlignmentResult:
    """Upgrade grid-observed EBSD to a full field.

    The set mean of the EBSD channels is the inpainting estimate; the
    alignment net then pulls it toward the actually measured pixels. PL
    channels are not touched (the result carries EBSD channels only).
    """
    observation = observation if observation is not None else recon_set.observation
    if not observation.layout.ebsd:
        raise UnsupportedTaskError(
            "reconstruction set has no EBSD channels; cannot super-resolve"
        )
    xbar = recon_set.mean_reconstruction()[:, :, list(observation.layout.ebsd)]
    return align_field(xbar, observation, seed=seed)


def denoise_pl(recon_set: ReconstructionSet):
    """Denoised PL image: element-wise mean of the set's PL channels."""
    if not isinstance(recon_set, ReconstructionSet):
        raise ConfigError("denoise_pl expects a ReconstructionSet")
    pl = recon_set.observation.layout.pl
    if not pl:
        raise UnsupportedTaskError(
            "reconstruction set has no PL channels; nothing to denoise"
        )
    return recon_set.samples[:, :, :, list(pl)].mean(axis=0)
