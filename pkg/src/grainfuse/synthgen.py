"""Synthetic polycrystal data generation.

Builds 3D Voronoi grain volumes with per-grain orientations, renders the two
imaging modalities used throughout the package (orientation maps as normalized
cubochoric channels, polarized-intensity stacks compressed to 3 PCA scores),
extracts ground-truth grain boundaries, samples augmented training crops, and
applies controlled perturbations (noise, scratches, registration shift).

The intensity model is deliberately ill-posed: it depends only on each grain's
c-axis direction, so rotations about the c-axis are invisible in the second
modality. That is the structural property the reconstruction models exploit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .errors import ConfigError
from .orientation import (
    CUBE_HALF_EDGE,
    cu2qu,
    normalize_cu,
    qu2cu,
    quat_multiply,
    random_quaternions,
    rotate_unit_z,
)

__all__ = [
    "GrainVolume",
    "RenderedVolume",
    "PcaCompressor",
    "generate_microstructure",
    "render_ebsd",
    "simulate_pl",
    "pca_compress",
    "extract_boundaries",
    "render_volume",
    "sample_training_slice",
    "sample_training_crop",
    "apply_dihedral",
    "perturb",
    "parse_perturbation",
    "PerturbationSpec",
]

CROP_SIZE = 64


@dataclass
class GrainVolume:
    """A voxelized polycrystal.

    Attributes
    ----------
    dims : tuple
        (X, Y, Z) voxel counts; slices are taken along Z.
    ids : ndarray, shape (Z, Y, X), int32
        Per-voxel grain ID in 1..G, or 0 for null (no grain).
    orientations : ndarray, shape (G + 1, 4)
        Grain ID -> unit quaternion; row 0 is an identity placeholder for
        the null ID and is never rendered.
    seed : int
        Generator seed, recorded for reproducibility.
    """

    dims: tuple
    ids: np.ndarray
    orientations: np.ndarray
    seed: int

    @property
    def n_grains(self):
        return self.orientations.shape[0] - 1

    @property
    def n_slices(self):
        return self.ids.shape[0]


def generate_microstructure(seed, dims=(96, 96, 64), n_grains=150,
                            texture_spread=0.8) -> GrainVolume:
    """Generate a random Voronoi polycrystal volume.

    Parameters
    ----------
    seed : int
        RNG seed; identical seeds give bit-identical volumes.
    dims : tuple
        (X, Y, Z) voxel counts.
    n_grains : int
        Number of grains. Seed points are drawn as distinct voxels so every
        grain owns at least one voxel and IDs are contiguous 1..n_grains.
    texture_spread : float or None
        Angular spread (radians) of orientations about a random per-volume
        reference orientation. None or 0 gives texture-free uniform
        orientations; the default 0.8 rad is a weak texture.

    Returns
    -------
    GrainVolume
    """
    nx, ny, nz = (int(d) for d in dims)
    if nx <= 0 or ny <= 0 or nz <= 0:
        raise ConfigError(f"volume dims must be positive, got {dims}")
    if n_grains < 1:
        raise ConfigError(f"n_grains must be >= 1, got {n_grains}")
    n_voxels = nx * ny * nz
    if n_grains > n_voxels:
        raise ConfigError(
            f"n_grains={n_grains} exceeds voxel count {n_voxels} for dims {dims}"
        )

    rng = np.random.default_rng(seed)
    flat = rng.choice(n_voxels, size=n_grains, replace=False)
    sz, sy, sx = np.unravel_index(flat, (nz, ny, nx))
    seeds_xyz = np.stack([sx, sy, sz], axis=1).astype(np.float64)

    zz, yy, xx = np.meshgrid(
        np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij"
    )
    voxels = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1).astype(np.float64)
    _, nearest = cKDTree(seeds_xyz).query(voxels, k=1)
    ids = (nearest.astype(np.int32) + 1).reshape(nz, ny, nx)

    if texture_spread:
        reference = random_quaternions(1, rng)[0]
        axes = rng.normal(size=(n_grains, 3))
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        angles = np.minimum(np.abs(rng.normal(0.0, texture_spread, n_grains)), np.pi)
        half = 0.5 * angles
        spread_q = np.concatenate(
            [np.cos(half)[:, None], axes * np.sin(half)[:, None]], axis=1
        )
        quats = quat_multiply(reference, spread_q)
    else:
        quats = random_quaternions(n_grains, rng)

    orientations = np.vstack([[1.0, 0.0, 0.0, 0.0], quats])
    return GrainVolume(dims=(nx, ny, nz), ids=ids, orientations=orientations,
                       seed=int(seed))


def render_ebsd(volume: GrainVolume, slice_index: int) -> np.ndarray:
    """Render one slice as per-pixel normalized cubochoric coordinates.

    Null-ID pixels render as the zero vector. Output shape (H, W, 3) with
    all values in [-1, 1], constant within each grain.
    """
    ids = volume.ids[slice_index]
    table = np.zeros((volume.orientations.shape[0], 3))
    table[1:] = normalize_cu(qu2cu(volume.orientations[1:]))
    return table[ids]


def simulate_pl(volume: GrainVolume, slice_index: int, n_rotations=9,
                step_deg=40.0, baseline=0.5) -> np.ndarray:
    """Render the raw polarized-intensity stack for one slice.

    Each grain's c-axis (the rotated +z axis, polar angle theta_c and azimuth
    psi_c) sets the response under a polarizer rotated in n_rotations equal
    steps: channel k = sin^2(theta_c) cos(2 (phi_k - psi_c))
    + (1 - sin^2(theta_c)) * baseline, phi_k = k * step. The stack depends on
    the orientation only through the c-axis direction.

    Returns shape (H, W, n_rotations); null-ID pixels are all zero.
    """
    if n_rotations < 2:
        raise ConfigError(f"n_rotations must be >= 2, got {n_rotations}")
    ids = volume.ids[slice_index]
    c_axes = rotate_unit_z(volume.orientations[1:])
    sin2 = c_axes[:, 0] ** 2 + c_axes[:, 1] ** 2
    psi = np.arctan2(c_axes[:, 1], c_axes[:, 0])
    phi = np.radians(step_deg) * np.arange(n_rotations)
    response = (
        sin2[:, None] * np.cos(2.0 * (phi[None, :] - psi[:, None]))
        + (1.0 - sin2)[:, None] * baseline
    )
    table = np.zeros((volume.orientations.shape[0], n_rotations))
    table[1:] = response
    return table[ids]


class PcaCompressor(BaseEstimator, TransformerMixin):
    """PCA compression of raw intensity stacks to a fixed score count.

    Projects mean-centered pixel vectors onto the top principal directions,
    then rescales scores with one global affine map (a single offset and
    scale shared by all components) so the fitting corpus spans [-1, 1].
    Projections of new data are clipped to that range.

    Parameters
    ----------
    n_components : int
        Number of scores kept per pixel (default 3).

    Attributes
    ----------
    mean_ : ndarray, shape (n_features,)
    components_ : ndarray, shape (n_features, n_components)
        Orthonormal columns, ordered by decreasing explained variance.
    explained_variance_ : ndarray, shape (n_components,)
    offset_, scale_ : float
        Global affine rescaling applied after projection.
    """

    def __init__(self, n_components=3):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ConfigError("fit expects a (n_samples, n_features) matrix")
        n, d = X.shape
        if self.n_components > d:
            raise ConfigError(
                f"n_components={self.n_components} exceeds feature count {d}"
            )
        if n < self.n_components:
            raise ConfigError(
                f"need at least {self.n_components} pixel vectors, got {n}"
            )
        self.mean_ = X.mean(axis=0)
        # d x d scatter is exact and avoids materializing a huge SVD.
        cov = np.zeros((d, d))
        step = 1_000_000
        for start in range(0, n, step):
            block = X[start:start + step] - self.mean_
            cov += block.T @ block
        cov /= max(n - 1, 1)
        eigvals, eigvecs = np.linalg.eigh(cov)
        order = np.argsort(eigvals)[::-1][: self.n_components]
        components = eigvecs[:, order]
        # Deterministic sign: largest-magnitude entry of each column positive.
        flip = np.sign(components[np.abs(components).argmax(axis=0),
                                  np.arange(components.shape[1])])
        flip[flip == 0] = 1.0
        self.components_ = components * flip
        self.explained_variance_ = np.maximum(eigvals[order], 0.0)

        scores = self._project(X)
        lo, hi = scores.min(), scores.max()
        if hi <= lo:
            lo, hi = lo - 1.0, lo + 1.0
        self.offset_ = float((hi + lo) / 2.0)
        self.scale_ = float((hi - lo) / 2.0)
        return self

    def _check_fitted(self):
        if not hasattr(self, "components_"):
            raise NotFittedError("PcaCompressor must be fitted before use")

    def _project(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean_) @ self.components_

    def transform(self, X):
        """Project pixel vectors to normalized scores in [-1, 1]."""
        self._check_fitted()
        scores = (self._project(X) - self.offset_) / self.scale_
        return np.clip(scores, -1.0, 1.0)

    def inverse_transform(self, scores):
        """Reconstruct pixel vectors from normalized scores."""
        self._check_fitted()
        raw = np.asarray(scores, dtype=np.float64) * self.scale_ + self.offset_
        return raw @ self.components_.T + self.mean_

    def transform_stack(self, stack):
        """Transform an (H, W, n_features) stack to an (H, W, k) score field."""
        stack = np.asarray(stack, dtype=np.float64)
        h, w, d = stack.shape
        return self.transform(stack.reshape(h * w, d)).reshape(h, w, self.n_components)

    def to_dict(self):
        """JSON-serializable state, persisted with datasets."""
        self._check_fitted()
        return {
            "n_components": int(self.n_components),
            "mean": self.mean_.tolist(),
            "components": self.components_.tolist(),
            "explained_variance": self.explained_variance_.tolist(),
            "offset": self.offset_,
            "scale": self.scale_,
        }

    @classmethod
    def from_dict(cls, state):
        obj = cls(n_components=int(state["n_components"]))
        obj.mean_ = np.array(state["mean"], dtype=np.float64)
        obj.components_ = np.array(state["components"], dtype=np.float64)
        obj.explained_variance_ = np.array(
            state["explained_variance"], dtype=np.float64
        )
        obj.offset_ = float(state["offset"])
        obj.scale_ = float(state["scale"])
        return obj


def pca_compress(stacks, k=3):
    """Fit a PCA basis on a set of raw stacks and compress each of them.

    Parameters
    ----------
    stacks : sequence of ndarray, each (H, W, 9)
        The fitting corpus; the basis is fit on all pixels pooled.
    k : int
        Number of components kept.

    Returns
    -------
    (fields, compressor)
        fields: list of (H, W, k) score fields in [-1, 1];
        compressor: the fitted PcaCompressor (persist it so training and
        test slices share one basis).
    """
    pooled = np.concatenate(
        [np.asarray(s, dtype=np.float64).reshape(-1, s.shape[-1]) for s in stacks]
    )
    compressor = PcaCompressor(n_components=k).fit(pooled)
    return [compressor.transform_stack(s) for s in stacks], compressor


def extract_boundaries(ids) -> np.ndarray:
    """Binary grain-boundary map of a slice.

    A pixel is boundary (1) iff it has a 4-neighbor within the slice carrying
    a different non-null ID, and the pixel itself is non-null. Null-ID pixels
    are ignored entirely: they are never boundary and never make a neighbor
    boundary.
    """
    ids = np.asarray(ids)
    bnd = np.zeros(ids.shape, dtype=bool)
    horiz = (
        (ids[:, 1:] != ids[:, :-1]) & (ids[:, 1:] != 0) & (ids[:, :-1] != 0)
    )
    bnd[:, 1:] |= horiz
    bnd[:, :-1] |= horiz
    vert = (
        (ids[1:, :] != ids[:-1, :]) & (ids[1:, :] != 0) & (ids[:-1, :] != 0)
    )
    bnd[1:, :] |= vert
    bnd[:-1, :] |= vert
    return bnd.astype(np.uint8)


@dataclass
class RenderedVolume:
    """All slices of a volume rendered once, for cheap crop sampling.

    Attributes
    ----------
    ebsd : ndarray (Z, H, W, 3)      normalized cubochoric channels
    pl : ndarray (Z, H, W, 3)        normalized PCA score channels
    ids : ndarray (Z, H, W) int32    grain IDs
    boundaries : ndarray (Z, H, W) uint8
    seed : int                       source volume seed
    """

    ebsd: np.ndarray
    pl: np.ndarray
    ids: np.ndarray
    boundaries: np.ndarray
    seed: int = 0

    @property
    def n_slices(self):
        return self.ids.shape[0]


def render_volume(volume: GrainVolume, compressor: PcaCompressor) -> RenderedVolume:
    """Render every slice of a volume with a fitted PCA compressor."""
    ebsd = np.stack([render_ebsd(volume, z) for z in range(volume.n_slices)])
    pl = np.stack(
        [
            compressor.transform_stack(simulate_pl(volume, z))
            for z in range(volume.n_slices)
        ]
    )
    bnd = np.stack([extract_boundaries(volume.ids[z]) for z in range(volume.n_slices)])
    return RenderedVolume(
        ebsd=ebsd.astype(np.float32),
        pl=pl.astype(np.float32),
        ids=volume.ids.copy(),
        boundaries=bnd,
        seed=volume.seed,
    )


def apply_dihedral(arr, k):
    """Apply element k of the dihedral-4 group to the two leading axes.

    k in 0..7: k % 4 counterclockwise quarter turns, plus a horizontal flip
    first when k >= 4. Works for (H, W) and (H, W, C) arrays.
    """
    k = int(k)
    if not 0 <= k <= 7:
        raise ValueError(f"dihedral element must be in 0..7, got {k}")
    out = arr[:, ::-1] if k >= 4 else arr
    return np.ascontiguousarray(np.rot90(out, k % 4, axes=(0, 1)))


def sample_training_crop(rendered: RenderedVolume, rng, crop=CROP_SIZE):
    """Random augmented crop returning both channels and grain IDs.

    Returns
    -------
    (sample, ids)
        sample: (crop, crop, 6) float32, EBSD channels then PL channels;
        ids: (crop, crop) int32 for the same augmented window.
    """
    z_count, h, w = rendered.ids.shape
    if h < crop or w < crop:
        raise ConfigError(
            f"volume slices {h}x{w} are smaller than the {crop}x{crop} crop"
        )
    z = int(rng.integers(0, z_count))
    i = int(rng.integers(0, h - crop + 1))
    j = int(rng.integers(0, w - crop + 1))
    k = int(rng.integers(0, 8))
    window = np.concatenate(
        [
            rendered.ebsd[z, i : i + crop, j : j + crop],
            rendered.pl[z, i : i + crop, j : j + crop],
        ],
        axis=-1,
    )
    ids = rendered.ids[z, i : i + crop, j : j + crop]
    return apply_dihedral(window, k).astype(np.float32), apply_dihedral(ids, k)


def sample_training_slice(rendered: RenderedVolume, rng, crop=CROP_SIZE):
    """Random 64x64 crop of a random slice with joint dihedral augmentation.

    Both modalities receive the same crop window and the same dihedral-4
    element. See sample_training_crop when the grain IDs are needed too.
    """
    sample, _ = sample_training_crop(rendered, rng, crop=crop)
    return sample


@dataclass
class PerturbationSpec:
    """A named perturbation with parameters.

    kind is one of none (identity), gaussian (params: sigma), scratch
    (params: count, width, intensity), shift (params: dx, dy).
    """

    kind: str
    params: dict = field(default_factory=dict)

    def describe(self):
        if not self.params:
            return self.kind
        inner = ",".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.kind}({inner})"


_PERTURB_DEFAULTS = {
    "none": {},
    "gaussian": {"sigma": 0.05},
    "scratch": {"count": 3, "width": 2.0, "intensity": 0.8},
    "shift": {"dx": 1, "dy": 0},
}

_PERTURB_POSITIONAL = {
    "none": (),
    "gaussian": ("sigma",),
    "scratch": ("count", "width", "intensity"),
    "shift": ("dx", "dy"),
}


def parse_perturbation(text) -> PerturbationSpec:
    """Parse a perturbation from text like gaussian(0.05) or shift(2,-1).

    Bare names take default parameters; positional arguments follow the
    order sigma / count,width,intensity / dx,dy.
    """
    text = str(text).strip()
    if "(" in text:
        if not text.endswith(")"):
            raise ConfigError(f"malformed perturbation {text!r}")
        kind, arg_text = text[:-1].split("(", 1)
        args = [a.strip() for a in arg_text.split(",") if a.strip()]
    else:
        kind, args = text, []
    kind = kind.strip().lower()
    if kind not in _PERTURB_DEFAULTS:
        known = ", ".join(sorted(_PERTURB_DEFAULTS))
        raise ConfigError(f"unknown perturbation {kind!r}; known kinds: {known}")
    params = dict(_PERTURB_DEFAULTS[kind])
    names = _PERTURB_POSITIONAL[kind]
    if len(args) > len(names):
        raise ConfigError(f"too many parameters for perturbation {kind!r}")
    for name, value in zip(names, args):
        params[name] = type(_PERTURB_DEFAULTS[kind][name])(float(value))
    return PerturbationSpec(kind=kind, params=params)


def _scratch_mask(shape, rng, count, width):
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(int(count)):
        p0 = rng.uniform([0, 0], [h, w])
        p1 = rng.uniform([0, 0], [h, w])
        seg = p1 - p0
        length2 = float(seg @ seg)
        dr = rows - p0[0]
        dc = cols - p0[1]
        if length2 == 0.0:
            dist2 = dr * dr + dc * dc
        else:
            t = np.clip((dr * seg[0] + dc * seg[1]) / length2, 0.0, 1.0)
            dist2 = (dr - t * seg[0]) ** 2 + (dc - t * seg[1]) ** 2
        mask |= dist2 <= (width / 2.0) ** 2
    return mask


def perturb(field, spec: PerturbationSpec, rng=None) -> np.ndarray:
    """Apply a controlled perturbation to an (H, W, C) or (H, W) field.

    gaussian adds i.i.d. zero-mean noise; scratch adds a constant intensity
    offset to every channel of pixels under randomly drawn line segments;
    shift translates the field by whole pixels with edge replication.
    Neither clamps the result. gaussian and scratch require an rng.
    """
    field = np.asarray(field, dtype=np.float64)
    if isinstance(spec, str):
        spec = parse_perturbation(spec)
    if spec.kind == "none":
        return field.copy()
    if spec.kind == "gaussian":
        sigma = float(spec.params["sigma"])
        if sigma == 0.0:
            return field.copy()
        if rng is None:
            raise ConfigError("gaussian perturbation requires an rng")
        return field + rng.normal(0.0, sigma, field.shape)
    if spec.kind == "scratch":
        if rng is None:
            raise ConfigError("scratch perturbation requires an rng")
        mask = _scratch_mask(field.shape[:2], rng,
                             spec.params["count"], spec.params["width"])
        out = field.copy()
        out[mask] += float(spec.params["intensity"])
        return out
    if spec.kind == "shift":
        dx, dy = int(spec.params["dx"]), int(spec.params["dy"])
        h, w = field.shape[:2]
        rows = np.clip(np.arange(h) - dy, 0, h - 1)
        cols = np.clip(np.arange(w) - dx, 0, w - 1)
        return field[np.ix_(rows, cols)].copy()
    raise ConfigError(f"unknown perturbation kind {spec.kind!r}")
