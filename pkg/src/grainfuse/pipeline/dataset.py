"""Dataset build, persistence, and deterministic evaluation slices.

A dataset is a directory holding one tensor container per volume plus a
``dataset.json`` carrying the generating config, the fitted PL
compression basis (with its global normalization affine), and the
volume file list. Rebuilding with the same config yields byte-identical
files, so a dataset directory is disposable cache, not a source of
truth.

Volume seeds derive from the dataset seed: training volume ``i`` uses
``seed + i`` and validation volume ``j`` uses ``seed + 1000 + j``, so
the two pools never share a generator stream. The compression basis is
fit on the training volumes only; validation and evaluation slices are
projected through that frozen basis.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .. import synthgen
from ..errors import ConfigError
from ..orientation import symmetry_group
from . import tensorio

__all__ = [
    "MODALITIES",
    "modality_channels",
    "Dataset",
    "EvalSlice",
    "build_dataset",
    "load_dataset",
    "dataset_matches",
    "training_sampler",
    "validation_batch",
    "eval_slices",
    "eval_slice_by_index",
    "slice_from_address",
]

MODALITIES = ("ep", "e", "p")
_CHANNELS = {"ep": slice(0, 6), "e": slice(0, 3), "p": slice(3, 6)}
EVAL_SLICE_COUNT = 30
VAL_SEED_OFFSET = 1000


def modality_channels(modality):
    """Channel slice of a 6-channel sample for a modality name."""
    try:
        return _CHANNELS[modality]
    except KeyError:
        raise ConfigError(
            f"unknown modality {modality!r}; expected one of {MODALITIES}"
        )


@dataclass
class Dataset:
    """Rendered volumes plus the shared compression basis."""

    train: list
    val: list
    compressor: synthgen.PcaCompressor
    config: dict

    @property
    def symmetry(self):
        return symmetry_group(self.config["symmetry"])


def _volume_file(role, index):
    return f"{role}_{index:02d}.gftc"


def _render_all(cfg):
    seed = int(cfg["seed"])
    train_vols = [
        synthgen.generate_microstructure(
            seed + i,
            dims=tuple(cfg["dims"]),
            n_grains=int(cfg["n_grains"]),
            texture_spread=cfg["texture_spread"],
        )
        for i in range(int(cfg["train_volumes"]))
    ]
    val_vols = [
        synthgen.generate_microstructure(
            seed + VAL_SEED_OFFSET + j,
            dims=tuple(cfg["val_dims"]),
            n_grains=int(cfg["n_grains"]),
            texture_spread=cfg["texture_spread"],
        )
        for j in range(int(cfg["val_volumes"]))
    ]

    train_stacks = [
        synthgen.simulate_pl(vol, z)
        for vol in train_vols
        for z in range(vol.n_slices)
    ]
    _, compressor = synthgen.pca_compress(
        train_stacks, k=int(cfg["pca_components"])
    )

    train = [synthgen.render_volume(v, compressor) for v in train_vols]
    val = [synthgen.render_volume(v, compressor) for v in val_vols]
    return Dataset(train=train, val=val, compressor=compressor,
                   config=dict(cfg))


def _write_volume(path, rendered, role, index):
    tensorio.write_tensors(
        path,
        {
            "ebsd": rendered.ebsd,
            "pl": rendered.pl,
            "ids": rendered.ids,
            "boundaries": rendered.boundaries,
        },
        meta={"role": role, "index": index, "seed": int(rendered.seed)},
    )


def build_dataset(dataset_cfg, out_dir):
    """Generate, render, and persist a dataset; returns the Dataset."""
    ds = _render_all(dataset_cfg)
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"train": [], "val": []}
    for role, volumes in (("train", ds.train), ("val", ds.val)):
        for i, rendered in enumerate(volumes):
            name = _volume_file(role, i)
            _write_volume(os.path.join(out_dir, name), rendered, role, i)
            manifest[role].append(name)
    record = {
        "config": ds.config,
        "compressor": ds.compressor.to_dict(),
        "volumes": manifest,
    }
    with open(os.path.join(out_dir, "dataset.json"), "w") as fh:
        json.dump(record, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return ds


def load_dataset(out_dir):
    """Load a dataset directory written by build_dataset."""
    index_path = os.path.join(out_dir, "dataset.json")
    if not os.path.exists(index_path):
        raise ConfigError(f"{out_dir} has no dataset.json; build it first")
    with open(index_path) as fh:
        record = json.load(fh)
    compressor = synthgen.PcaCompressor.from_dict(record["compressor"])

    def read_volume(name):
        arrays, meta = tensorio.read_tensors(os.path.join(out_dir, name))
        return synthgen.RenderedVolume(
            ebsd=arrays["ebsd"],
            pl=arrays["pl"],
            ids=arrays["ids"],
            boundaries=arrays["boundaries"],
            seed=int(meta["seed"]),
        )

    return Dataset(
        train=[read_volume(n) for n in record["volumes"]["train"]],
        val=[read_volume(n) for n in record["volumes"]["val"]],
        compressor=compressor,
        config=record["config"],
    )


def dataset_matches(out_dir, dataset_cfg):
    """True when out_dir holds a complete dataset built from this config."""
    index_path = os.path.join(out_dir, "dataset.json")
    if not os.path.exists(index_path):
        return False
    with open(index_path) as fh:
        record = json.load(fh)
    if record.get("config") != dict(dataset_cfg):
        return False
    names = record["volumes"]["train"] + record["volumes"]["val"]
    return all(os.path.exists(os.path.join(out_dir, n)) for n in names)


def training_sampler(dataset, modality="ep", crop=64):
    """Batch sampler over the training volumes for denoiser training.

    Returns a callable ``(rng, batch_size) -> (B, crop, crop, C)`` that
    picks a volume uniformly, then a random augmented crop, keeping only
    the channels of ``modality``.
    """
    channels = modality_channels(modality)
    volumes = dataset.train
    if not volumes:
        raise ConfigError("dataset has no training volumes")

    def sample_batch(rng, batch_size):
        crops = []
        for _ in range(int(batch_size)):
            vol = volumes[int(rng.integers(0, len(volumes)))]
            crops.append(
                synthgen.sample_training_slice(vol, rng, crop=crop)[:, :, channels]
            )
        return np.stack(crops)

    return sample_batch


def validation_batch(dataset, modality="ep", n=64, seed=0, crop=64):
    """A frozen batch of crops from the validation volumes."""
    channels = modality_channels(modality)
    volumes = dataset.val
    if not volumes:
        raise ConfigError("dataset has no validation volumes")
    rng = np.random.default_rng(seed)
    crops = []
    for _ in range(int(n)):
        vol = volumes[int(rng.integers(0, len(volumes)))]
        crops.append(
            synthgen.sample_training_slice(vol, rng, crop=crop)[:, :, channels]
        )
    return np.stack(crops)


@dataclass
class EvalSlice:
    """One held-out evaluation window with every ground truth it needs.

    ``sample`` stacks EBSD then PL channels, float64, values in [-1, 1].
    ``boundaries`` is recomputed from the cropped IDs so truth matches
    exactly what is visible inside the window.
    """

    index: int
    volume_role: str
    volume_index: int
    z: int
    y0: int
    x0: int
    crop: int
    sample: np.ndarray = field(repr=False)
    ids: np.ndarray = field(repr=False)
    boundaries: np.ndarray = field(repr=False)

    @property
    def ebsd(self):
        return self.sample[:, :, :3]

    @property
    def pl(self):
        return self.sample[:, :, 3:]

    def address(self):
        """JSON-able coordinates sufficient to rebuild this slice."""
        return {
            "index": int(self.index),
            "volume_role": self.volume_role,
            "volume_index": int(self.volume_index),
            "z": int(self.z),
            "y0": int(self.y0),
            "x0": int(self.x0),
            "crop": int(self.crop),
        }


def _cut_slice(dataset, index, vol_idx, z, crop, y0=None, x0=None):
    vol = dataset.val[vol_idx]
    _, h, w = vol.ids.shape
    if h < crop or w < crop:
        raise ConfigError(
            f"validation slices {h}x{w} are smaller than crop {crop}"
        )
    if y0 is None:
        y0 = (h - crop) // 2
    if x0 is None:
        x0 = (w - crop) // 2
    window = np.concatenate(
        [
            vol.ebsd[z, y0 : y0 + crop, x0 : x0 + crop],
            vol.pl[z, y0 : y0 + crop, x0 : x0 + crop],
        ],
        axis=-1,
    ).astype(np.float64)
    ids = vol.ids[z, y0 : y0 + crop, x0 : x0 + crop].copy()
    return EvalSlice(
        index=index,
        volume_role="val",
        volume_index=vol_idx,
        z=int(z),
        y0=y0,
        x0=x0,
        crop=crop,
        sample=window,
        ids=ids,
        boundaries=synthgen.extract_boundaries(ids),
    )


def _slice_pairs(dataset, count):
    pairs = [
        (v, z)
        for v in range(len(dataset.val))
        for z in range(dataset.val[v].n_slices)
    ]
    if count is None:
        count = min(EVAL_SLICE_COUNT, len(pairs))
    if count > len(pairs):
        raise ConfigError(
            f"requested {count} eval slices, dataset has {len(pairs)}"
        )
    if count < 1:
        raise ConfigError("dataset has no validation slices")
    return pairs, count


def eval_slices(dataset, count=None, crop=64):
    """The canonical held-out slice list: centered crops, evenly strided.

    Slices come from the validation volumes in (volume, z) order with a
    uniform stride, so any two runs over the same dataset score the same
    windows. The default count is 30 (or everything, on datasets with
    fewer slices); the 30-slice list is split by convention into a trend
    set (the first 20) and a test set (the last 10).
    """
    pairs, count = _slice_pairs(dataset, count)
    step = len(pairs) // count
    return [
        _cut_slice(dataset, i, *pairs[i * step], crop)
        for i in range(count)
    ]


def eval_slice_by_index(dataset, index, count=None, crop=64):
    """One slice of the canonical list without cutting the others."""
    pairs, count = _slice_pairs(dataset, count)
    if not 0 <= index < count:
        raise ConfigError(
            f"slice_index {index} out of range for the {count}-slice list"
        )
    step = len(pairs) // count
    return _cut_slice(dataset, index, *pairs[index * step], crop)


def slice_from_address(dataset, address):
    """Rebuild the exact EvalSlice a persisted artifact was scored on."""
    if address.get("volume_role", "val") != "val":
        raise ConfigError(
            f"unsupported slice volume role {address.get('volume_role')!r}"
        )
    vol_idx = int(address["volume_index"])
    if not 0 <= vol_idx < len(dataset.val):
        raise ConfigError(
            f"slice address names validation volume {vol_idx}, dataset "
            f"has {len(dataset.val)}"
        )
    return _cut_slice(
        dataset,
        int(address["index"]),
        vol_idx,
        int(address["z"]),
        int(address["crop"]),
        y0=int(address["y0"]),
        x0=int(address["x0"]),
    )
