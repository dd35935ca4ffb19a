"""Tests for the pipeline layer: container format, config handling,
dataset persistence, checkpoints, reconstruction storage, the sweep
harness, and the command-line interface."""

import json
import os
import shutil
import struct
import subprocess
import sys

import numpy as np
import pytest

from grainfuse import metrics, solver
from grainfuse.errors import (
    ConfigError,
    IncompatibilityError,
    NumericalDivergenceError,
    TensorFormatError,
)
from grainfuse.pipeline import cli, config, experiments, images, tensorio
from grainfuse.pipeline import dataset as dsmod

TINY_OVERRIDES = [
    "dataset.dims=[64,64,6]",
    "dataset.val_dims=[64,64,4]",
    "dataset.n_grains=25",
    "model.base_width=8",
    "train.steps=12",
    "train.batch_size=4",
    "train.val_batch=8",
    "solver.n_particles=2",
    "solver.n_reconstructions=2",
    "solver.n_steps=10",
    "solver.eps_batch=64",
]


@pytest.fixture(scope="module")
def tiny_cfg():
    return config.load_config(overrides=TINY_OVERRIDES)


@pytest.fixture(scope="module")
def workspace(tiny_cfg, tmp_path_factory):
    """A fully populated work directory: dataset, EP checkpoint, one
    reconstruction condition. Built once; tests must not mutate it."""
    work = str(tmp_path_factory.mktemp("workspace"))
    ds = experiments.ensure_dataset(tiny_cfg, work)
    model, meta = experiments.ensure_model(tiny_cfg, ds, "ep", work)
    return {"dir": work, "dataset": ds, "model": model, "meta": meta}


class TestTensorContainer:
    """The named-tensor file format."""

    def test_round_trip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {
            "field": rng.standard_normal((2, 3, 4, 5)).astype(np.float32),
            "ids": rng.integers(-(2**31), 2**31 - 1, (7, 2)).astype(np.int32),
            "mask": rng.integers(0, 256, 11).astype(np.uint8),
        }
        meta = {"nested": {"list": [1, 2.5, "x"], "flag": True}, "n": None}
        path = tmp_path / "t.gftc"
        tensorio.write_tensors(path, arrays, meta=meta)
        back, back_meta = tensorio.read_tensors(path)
        assert set(back) == set(arrays)
        for name in arrays:
            assert back[name].dtype == arrays[name].dtype
            assert back[name].shape == arrays[name].shape
            assert np.array_equal(back[name], arrays[name])
        assert back_meta == meta

    def test_write_read_without_meta(self, tmp_path):
        path = tmp_path / "t.gftc"
        tensorio.write_tensors(path, {"a": np.zeros(3, np.float32)})
        back, meta = tensorio.read_tensors(path)
        assert meta is None
        assert back["a"].shape == (3,)

    def test_scalar_rank_zero_round_trip(self, tmp_path):
        path = tmp_path / "t.gftc"
        tensorio.write_tensors(path, {"s": np.float32(2.5)})
        back, _ = tensorio.read_tensors(path)
        assert back["s"].shape == ()
        assert back["s"] == np.float32(2.5)

    def test_unsupported_dtype_rejected_at_write(self, tmp_path):
        with pytest.raises(TensorFormatError, match="float64"):
            tensorio.write_tensors(
                tmp_path / "t.gftc", {"a": np.zeros(3, np.float64)}
            )

    def test_reserved_meta_name_rejected(self, tmp_path):
        with pytest.raises(TensorFormatError, match="reserved"):
            tensorio.write_tensors(
                tmp_path / "t.gftc", {"__meta__": np.zeros(1, np.uint8)}
            )

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.gftc"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(TensorFormatError, match="magic"):
            tensorio.read_tensors(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "t.gftc"
        tensorio.write_tensors(
            path, {"a": np.arange(100, dtype=np.float32)}
        )
        blob = path.read_bytes()
        cut = tmp_path / "cut.gftc"
        cut.write_bytes(blob[: len(blob) - 37])
        with pytest.raises(TensorFormatError, match="truncated"):
            tensorio.read_tensors(cut)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "t.gftc"
        tensorio.write_tensors(path, {"a": np.zeros(4, np.float32)})
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(TensorFormatError, match="trailing"):
            tensorio.read_tensors(path)

    def test_unknown_version_rejected(self, tmp_path):
        path = tmp_path / "t.gftc"
        tensorio.write_tensors(path, {"a": np.zeros(4, np.float32)})
        blob = bytearray(path.read_bytes())
        blob[4:6] = struct.pack("<H", 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(TensorFormatError, match="version"):
            tensorio.read_tensors(path)

    def test_unknown_dtype_code_rejected(self, tmp_path):
        path = tmp_path / "t.gftc"
        tensorio.write_tensors(path, {"ab": np.zeros(4, np.float32)})
        blob = bytearray(path.read_bytes())
        # magic(4) version(2) count(4) name_len(2) name(2) -> dtype byte
        blob[14] = 200
        path.write_bytes(bytes(blob))
        with pytest.raises(TensorFormatError, match="dtype code"):
            tensorio.read_tensors(path)


class TestConfig:
    """Defaults, merging, and overrides."""

    def test_default_config_is_a_fresh_copy(self):
        one = config.default_config()
        one["train"]["steps"] = 1
        assert config.default_config()["train"]["steps"] != 1

    def test_file_then_flag_precedence(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("train:\n  steps: 100\n  batch_size: 4\n")
        cfg = config.load_config(path, overrides=["train.steps=7"])
        assert cfg["train"]["steps"] == 7
        assert cfg["train"]["batch_size"] == 4
        assert cfg["train"]["lr"] == config.DEFAULTS["train"]["lr"]

    def test_unknown_key_in_file_names_the_path(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("train:\n  stepz: 100\n")
        with pytest.raises(ConfigError, match="train.stepz"):
            config.load_config(path)

    def test_unknown_override_key_rejected(self):
        with pytest.raises(ConfigError, match="solver.typo"):
            config.load_config(overrides=["solver.typo=3"])

    def test_replacing_a_section_with_a_scalar_rejected(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("train: 5\n")
        with pytest.raises(ConfigError, match="section"):
            config.load_config(path)

    def test_override_value_parsing(self):
        cases = [
            ("train.lr=1e-3", ("train", "lr"), 1e-3),
            ("train.steps=200", ("train", "steps"), 200),
            ("model.attention=true", ("model", "attention"), True),
            ("solver.n_steps=null", ("solver", "n_steps"), None),
            ("observe.mask=grid(4)", ("observe", "mask"), "grid(4)"),
            ("evaluate.tasks=[boundary]", ("evaluate", "tasks"),
             ["boundary"]),
        ]
        for text, path, expected in cases:
            got_path, got_value = config.parse_override(text)
            assert got_path == path
            assert got_value == expected
            assert type(got_value) is type(expected)

    def test_malformed_override_rejected(self):
        with pytest.raises(ConfigError, match="key=value"):
            config.parse_override("no-equals-sign")

    def test_save_load_round_trip(self, tmp_path):
        cfg = config.load_config(overrides=TINY_OVERRIDES)
        path = tmp_path / "resolved.yaml"
        config.save_config(cfg, path)
        assert config.load_config(path) == cfg

    def test_fingerprint_tracks_selected_sections(self):
        base = config.default_config()
        other = config.load_config(overrides=["solver.seed=9"])
        assert config.config_fingerprint(base) != config.config_fingerprint(
            other
        )
        keys = ("dataset", "train")
        assert config.config_fingerprint(
            base, keys=keys
        ) == config.config_fingerprint(other, keys=keys)


class TestDataset:
    """Dataset build, persistence, and the canonical slice list."""

    def test_build_then_load_round_trip(self, tiny_cfg, workspace):
        loaded = dsmod.load_dataset(os.path.join(workspace["dir"], "dataset"))
        built = workspace["dataset"]
        assert len(loaded.train) == len(built.train)
        assert len(loaded.val) == len(built.val)
        for a, b in zip(loaded.train + loaded.val, built.train + built.val):
            assert np.array_equal(a.ebsd, b.ebsd)
            assert np.array_equal(a.pl, b.pl)
            assert np.array_equal(a.ids, b.ids)
            assert np.array_equal(a.boundaries, b.boundaries)
            assert a.seed == b.seed
        assert loaded.compressor.to_dict() == built.compressor.to_dict()
        assert loaded.config == tiny_cfg["dataset"]

    def test_rebuild_is_byte_identical(self, tiny_cfg, workspace, tmp_path):
        first = os.path.join(workspace["dir"], "dataset")
        second = tmp_path / "dataset"
        dsmod.build_dataset(tiny_cfg["dataset"], second)
        names = sorted(os.listdir(first))
        assert "dataset.json" in names
        for name in names:
            if name == "config.yaml":
                continue
            with open(os.path.join(first, name), "rb") as fh:
                a = fh.read()
            with open(second / name, "rb") as fh:
                b = fh.read()
            assert a == b, name

    def test_dataset_matches_detects_config_drift(self, tiny_cfg, workspace):
        ddir = os.path.join(workspace["dir"], "dataset")
        assert dsmod.dataset_matches(ddir, tiny_cfg["dataset"])
        changed = dict(tiny_cfg["dataset"], seed=99)
        assert not dsmod.dataset_matches(ddir, changed)
        assert not dsmod.dataset_matches(ddir + "-missing", tiny_cfg["dataset"])

    def test_eval_slices_are_deterministic_and_consistent(self, workspace):
        ds = workspace["dataset"]
        first = dsmod.eval_slices(ds)
        second = dsmod.eval_slices(ds)
        assert len(first) == 8
        for a, b in zip(first, second):
            assert np.array_equal(a.sample, b.sample)
            assert a.address() == b.address()
        # truth boundaries match the cropped IDs exactly
        from grainfuse.synthgen import extract_boundaries

        for sl in first:
            assert np.array_equal(sl.boundaries, extract_boundaries(sl.ids))
            assert sl.sample.shape == (64, 64, 6)
            assert np.all(np.abs(sl.sample) <= 1.0 + 1e-12)

    def test_slice_from_address_reproduces_the_window(self, workspace):
        ds = workspace["dataset"]
        for sl in dsmod.eval_slices(ds)[:3]:
            again = dsmod.slice_from_address(ds, sl.address())
            assert np.array_equal(again.sample, sl.sample)
            assert np.array_equal(again.ids, sl.ids)

    def test_slice_index_out_of_range_rejected(self, workspace):
        with pytest.raises(ConfigError, match="out of range"):
            dsmod.eval_slice_by_index(workspace["dataset"], 8)

    def test_training_sampler_shapes_and_modalities(self, workspace):
        ds = workspace["dataset"]
        rng = np.random.default_rng(3)
        batch = dsmod.training_sampler(ds, "ep")(rng, 4)
        assert batch.shape == (4, 64, 64, 6)
        for modality, width in (("e", 3), ("p", 3)):
            sample = dsmod.training_sampler(ds, modality)(
                np.random.default_rng(3), 2
            )
            assert sample.shape == (2, 64, 64, width)

    def test_training_sampler_modality_channels_align(self, workspace):
        ds = workspace["dataset"]
        full = dsmod.training_sampler(ds, "ep")(np.random.default_rng(11), 3)
        ebsd = dsmod.training_sampler(ds, "e")(np.random.default_rng(11), 3)
        pl = dsmod.training_sampler(ds, "p")(np.random.default_rng(11), 3)
        assert np.array_equal(full[..., :3], ebsd)
        assert np.array_equal(full[..., 3:], pl)

    def test_validation_batch_is_frozen_by_seed(self, workspace):
        ds = workspace["dataset"]
        a = dsmod.validation_batch(ds, "ep", n=5, seed=2)
        b = dsmod.validation_batch(ds, "ep", n=5, seed=2)
        c = dsmod.validation_batch(ds, "ep", n=5, seed=3)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_unknown_modality_rejected(self, workspace):
        with pytest.raises(ConfigError, match="modality"):
            dsmod.training_sampler(workspace["dataset"], "x")


class TestCheckpoints:
    """Checkpoint persistence and the training cache."""

    def test_checkpoint_round_trip_predicts_identically(
        self, workspace, tmp_path
    ):
        model = workspace["model"]
        path = tmp_path / "ep.gftc"
        experiments.save_checkpoint(path, model, workspace["meta"])
        again, meta = experiments.load_checkpoint(path)
        assert meta["modality"] == "ep"
        assert again.get_params() == model.get_params()
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 64, 64, 6))
        for t in (3, 500):
            eps_a = model.eps_fn()(x, t)
            eps_b = again.eps_fn()(x, t)
            assert np.array_equal(eps_a, eps_b)

    def test_history_csv_has_init_row(self, workspace):
        path = os.path.join(
            workspace["dir"], "checkpoints", "ep_history.csv"
        )
        with open(path) as fh:
            lines = fh.read().strip().splitlines()
        assert lines[0] == "step,loss,val_loss"
        first = lines[1].split(",")
        assert first[0] == "0" and first[1] == ""
        assert float(first[2]) == workspace["meta"]["init_val_loss"]

    def test_ensure_model_hits_the_cache(self, tiny_cfg, workspace):
        path = os.path.join(workspace["dir"], "checkpoints", "ep.gftc")
        before = os.path.getmtime(path)
        model, meta = experiments.ensure_model(
            tiny_cfg, workspace["dataset"], "ep", workspace["dir"]
        )
        assert os.path.getmtime(path) == before
        assert meta["history"] == workspace["meta"]["history"]

    def test_fingerprint_change_retrains(self, tiny_cfg, workspace, tmp_path):
        work = str(tmp_path)
        shutil.copytree(
            os.path.join(workspace["dir"], "dataset"),
            os.path.join(work, "dataset"),
        )
        shutil.copytree(
            os.path.join(workspace["dir"], "checkpoints"),
            os.path.join(work, "checkpoints"),
        )
        changed = config.load_config(
            overrides=TINY_OVERRIDES + ["train.steps=13"]
        )
        ds = experiments.ensure_dataset(changed, work)
        model, meta = experiments.ensure_model(changed, ds, "ep", work)
        assert meta["history"][-1]["step"] == 13
        assert meta["fingerprint"] != workspace["meta"]["fingerprint"]

    def test_initial_validation_loss_matches_zero_prediction(
        self, tiny_cfg, workspace
    ):
        from grainfuse import diffusion

        model = workspace["model"]
        val = dsmod.validation_batch(
            workspace["dataset"], "ep", n=8,
            seed=tiny_cfg["train"]["seed"] + 17,
        )
        loss = experiments.initial_validation_loss(model, val)
        vx0, vt, veps = diffusion.make_validation_tuples(
            val, model.schedule, model.seed + 1
        )
        # the out conv starts at zero, so the init net predicts zero noise
        expected = np.float32(
            np.mean(
                np.sum(veps.astype(np.float32).reshape(8, -1) ** 2, axis=1)
            )
        )
        assert loss == pytest.approx(float(expected), rel=1e-5)

    def test_modalities_get_distinct_seeds(self, tiny_cfg):
        seeds = {
            experiments.model_params(tiny_cfg, m)["seed"]
            for m in ("ep", "e", "p")
        }
        assert len(seeds) == 3


class TestObservationBuilding:
    """Perturbation, masking, and assumed-noise wiring."""

    def test_perturbation_touches_only_pl_channels(self, workspace):
        sl = dsmod.eval_slices(workspace["dataset"])[0]
        ocfg = {
            "modality": "ep", "mask": "grid(4)", "sigma_y": 0.0,
            "pl_perturb": "gaussian(0.05)", "assume_sigma": 0.05,
            "slice_index": 0, "seed": 0,
        }
        obs, presented = experiments.build_observation(sl, ocfg)
        assert np.array_equal(presented[:, :, :3], sl.ebsd)
        assert not np.array_equal(presented[:, :, 3:], sl.pl)
        assert obs.sigma_y == 0.05
        # observed values come from the presented field, not the truth
        scattered = obs.scattered()
        pl_mask = np.zeros_like(scattered, dtype=bool)
        pl_mask[:, :, 3:] = True
        assert np.array_equal(
            scattered[pl_mask], presented[pl_mask]
        )

    def test_observation_is_deterministic_per_slice(self, workspace):
        sl = dsmod.eval_slices(workspace["dataset"])[1]
        ocfg = {
            "modality": "ep", "mask": "random(0.3)", "sigma_y": 0.02,
            "pl_perturb": "gaussian(0.05)", "assume_sigma": None,
            "slice_index": 1, "seed": 5,
        }
        a, pa = experiments.build_observation(sl, ocfg)
        b, pb = experiments.build_observation(sl, ocfg)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.operator.mask, b.operator.mask)
        assert np.array_equal(pa, pb)
        assert a.sigma_y == 0.02

    def test_condition_name_is_filesystem_safe_and_stable(self, tiny_cfg):
        ocfg = dict(tiny_cfg["observe"], pl_perturb="gaussian(0.05)",
                    assume_sigma=0.05)
        name = experiments.condition_name(ocfg, tiny_cfg["solver"])
        assert name == experiments.condition_name(ocfg, tiny_cfg["solver"])
        assert "(" not in name and ")" not in name and "." not in name
        other = experiments.condition_name(
            dict(ocfg, mask="grid(2)"), tiny_cfg["solver"]
        )
        assert name != other


@pytest.fixture(scope="module")
def stored(tiny_cfg, workspace):
    """One persisted reconstruction set plus its file path."""
    sl = dsmod.eval_slices(workspace["dataset"])[0]
    rset = experiments.ensure_reconstruction(
        workspace["model"], sl, tiny_cfg["observe"],
        tiny_cfg["solver"], workspace["dir"],
    )
    name = experiments.condition_name(
        tiny_cfg["observe"], tiny_cfg["solver"]
    )
    path = os.path.join(
        workspace["dir"], "recon", name, "slice_000.gftc"
    )
    return {"rset": rset, "path": path, "slice": sl}


class TestReconstructionStore:
    """Persistence and caching of reconstruction sets."""

    def test_store_round_trip(self, stored):
        rset, meta = experiments.load_reconstruction_set(stored["path"])
        assert np.array_equal(rset.samples, stored["rset"].samples)
        obs = rset.observation
        other = stored["rset"].observation
        assert np.array_equal(obs.operator.mask, other.operator.mask)
        assert np.array_equal(obs.values, other.values)
        assert obs.sigma_y == other.sigma_y
        assert obs.layout == other.layout
        assert np.array_equal(obs.ebsd_pixel_mask, other.ebsd_pixel_mask)
        assert meta["slice"] == stored["slice"].address()
        assert meta["condition"]["observe"]["mask"] == "grid(4)"

    def test_samples_are_float32_canonical(self, stored):
        # everything persisted round-trips through float32, so warm and
        # cold caches score the same numbers
        samples = stored["rset"].samples
        assert samples.dtype == np.float64
        assert np.array_equal(samples, samples.astype(np.float32))

    def test_cache_hit_returns_identical_set(self, tiny_cfg, workspace,
                                             stored):
        before = os.path.getmtime(stored["path"])
        again = experiments.ensure_reconstruction(
            workspace["model"], stored["slice"], tiny_cfg["observe"],
            tiny_cfg["solver"], workspace["dir"],
        )
        assert os.path.getmtime(stored["path"]) == before
        assert np.array_equal(again.samples, stored["rset"].samples)

    def test_incompatible_channels_rejected(self, tiny_cfg, workspace):
        sl = dsmod.eval_slices(workspace["dataset"])[0]
        ocfg = dict(tiny_cfg["observe"], modality="e")
        obs, _ = experiments.build_observation(sl, ocfg)
        with pytest.raises(IncompatibilityError, match="channels"):
            experiments.reconstruct_observation(
                workspace["model"], obs, tiny_cfg["solver"]
            )


@pytest.fixture(scope="module")
def scored(tiny_cfg, workspace):
    """A fully scored slice with its collected intermediate arrays."""
    ds = workspace["dataset"]
    sl = dsmod.eval_slices(ds)[0]
    rset = experiments.ensure_reconstruction(
        workspace["model"], sl, tiny_cfg["observe"],
        tiny_cfg["solver"], workspace["dir"],
    )
    collect = {}
    report = experiments.evaluate_slice(
        rset, sl, sym=ds.symmetry, seed=1,
        labels={"slice": sl.index}, collect=collect,
    )
    return {"report": report, "collect": collect, "rset": rset,
            "slice": sl, "ds": ds}


class TestEvaluateSlice:
    """Merged per-slice scoring across the task heads."""

    def test_all_fields_present_for_multimodal(self, scored):
        report = scored["report"]
        scores = report.scores()
        for name in metrics.MetricReport._SCORE_FIELDS:
            assert np.isfinite(scores[name]), name
        assert report.orientation.n_all > 0
        assert report.labels["slice"] == 0
        assert "align_val_mse" in report.labels

    def test_collect_carries_exportable_arrays(self, scored):
        collect = scored["collect"]
        assert collect["gradient_mean"].shape == (64, 64)
        assert collect["boundary_map"].dtype == np.uint8
        assert collect["aligned_field"].shape == (64, 64, 3)
        assert collect["denoised_pl"].shape == (64, 64, 3)

    def test_unknown_task_rejected(self, scored):
        with pytest.raises(ConfigError, match="unknown task"):
            experiments.evaluate_slice(
                scored["rset"], scored["slice"],
                sym=scored["ds"].symmetry, task_names=("boundry",),
            )

    def test_superres_requires_symmetry(self, scored):
        with pytest.raises(ConfigError, match="symmetry"):
            experiments.evaluate_slice(
                scored["rset"], scored["slice"], sym=None,
                task_names=("superres",),
            )

    def test_modality_gaps_leave_nan_scores(self, scored):
        rset = scored["rset"]
        obs = solver.make_observation(
            scored["slice"].ebsd, "grid(4)", sigma_y=0.0,
            layout=solver.ModalityLayout.ebsd_only(),
        )
        ebsd_only = solver.ReconstructionSet(
            samples=rset.samples[:, :, :, :3],
            observation=obs,
            seeds=rset.seeds,
        )
        report = experiments.evaluate_slice(
            ebsd_only, scored["slice"], sym=scored["ds"].symmetry,
        )
        assert np.isnan(report.gbce)
        assert np.isnan(report.pl_mse)
        assert report.orientation is not None

    def test_baseline_report_scores_boundaries_only(self, scored):
        sl = scored["slice"]
        report = experiments.baseline_boundary_report(sl.pl, sl)
        assert np.isfinite(report.gbce)
        assert np.isfinite(report.chamfer_total)
        assert np.isnan(report.pl_mse)
        assert report.orientation is None


def _report(**scores):
    report = metrics.MetricReport()
    for key, value in scores.items():
        setattr(report, key, value)
    return report


class TestSweepHarness:
    """The factorial sweep driver."""

    def test_cells_enumerate_lexicographically_with_seeds(self):
        calls = []

        def cell(mask, n, repeat, seed):
            calls.append((mask, n, repeat, seed))
            return [_report(gbce=1.0)]

        metrics.sweep(cell, ["none", "grid(4)"], [10, 1], repeats=2,
                      base_seed=5)
        expected_cells = [("grid(4)", 1), ("grid(4)", 10), ("none", 1),
                          ("none", 10)]
        assert [(m, n) for m, n, _, _ in calls] == [
            c for c in expected_cells for _ in range(2)
        ]
        seeds = [s for _, _, _, s in calls]
        assert len(set(seeds)) == len(seeds)
        again = []

        def cell2(mask, n, repeat, seed):
            again.append((mask, n, repeat, seed))
            return [_report(gbce=1.0)]

        metrics.sweep(cell2, ["grid(4)", "none"], [1, 10], repeats=2,
                      base_seed=5)
        assert again == calls

    def test_rows_carry_labels_and_scores(self):
        def cell(mask, n, repeat, seed):
            return [
                _report(gbce=float(n), labels={"slice": i}) for i in range(2)
            ]

        result = metrics.sweep(cell, ["none"], [1, 3])
        assert [r["slice"] for r in result.rows] == [0, 1, 0, 1]
        assert [r["n"] for r in result.rows] == [1, 1, 3, 3]
        assert [r["gbce"] for r in result.rows] == [1.0, 1.0, 3.0, 3.0]
        assert all(r["mask"] == "none" for r in result.rows)

    def test_summary_mean_and_band(self):
        values = {0: [1.0, 3.0], 1: [5.0, 7.0]}

        def cell(mask, n, repeat, seed):
            return [_report(gbce=v) for v in values[repeat]]

        result = metrics.sweep(cell, ["none"], [1], repeats=2)
        entry = result.summary[0]
        assert entry["mask"] == "none" and entry["n"] == 1
        assert entry["gbce_mean"] == pytest.approx(4.0)
        # repeat means 2 and 6; band = 2 * std(ddof=1) / sqrt(2)
        expected = 2.0 * np.std([2.0, 6.0], ddof=1) / np.sqrt(2.0)
        assert entry["gbce_band"] == pytest.approx(expected)
        assert np.isnan(entry["pl_mse_mean"])

    def test_single_repeat_band_is_nan(self):
        result = metrics.sweep(
            lambda m, n, r, s: [_report(gbce=1.0)], ["none"], [1]
        )
        assert np.isnan(result.summary[0]["gbce_band"])

    def test_workers_do_not_change_results(self):
        def cell(mask, n, repeat, seed):
            return [
                _report(gbce=seed + i, labels={"slice": i}) for i in range(3)
            ]

        serial = metrics.sweep(cell, ["none", "grid(2)"], [1, 4], repeats=2)
        threaded = metrics.sweep(cell, ["none", "grid(2)"], [1, 4],
                                 repeats=2, workers=3)
        # JSON text comparison keeps NaN-valued fields comparable
        assert json.dumps(serial.rows) == json.dumps(threaded.rows)
        assert json.dumps(serial.summary) == json.dumps(threaded.summary)

    def test_failure_propagates_after_partial_delivery(self):
        seen = []

        def cell(mask, n, repeat, seed):
            if mask == "none":
                raise NumericalDivergenceError("collapsed")
            return [_report(gbce=1.0)]

        def on_result(mask, n, repeat, reports):
            seen.append((mask, n))

        with pytest.raises(NumericalDivergenceError):
            metrics.sweep(cell, ["grid(4)", "none"], [1], on_result=on_result)
        assert seen == [("grid(4)", 1)]

    def test_bad_repeats_rejected(self):
        with pytest.raises(ValueError, match="repeats"):
            metrics.sweep(lambda *a: [], ["none"], [1], repeats=0)


class TestImages:
    """Image export helpers."""

    def test_to_uint8_scales_and_handles_constants(self):
        out = images.to_uint8(np.array([[0.0, 0.5, 1.0]]))
        assert out.tolist() == [[0, 128, 255]]
        assert images.to_uint8(np.full((2, 2), 3.3)).tolist() == [
            [0, 0], [0, 0]
        ]

    def test_save_image_writes_png(self, tmp_path):
        path = str(tmp_path / "x.png")
        data = np.arange(12, dtype=np.uint8).reshape(3, 4)
        written = images.save_image(path, data)
        assert written == path
        with open(written, "rb") as fh:
            assert fh.read(8) == b"\x89PNG\r\n\x1a\n"

    def test_field_image_full_range(self, tmp_path):
        field = np.zeros((2, 2, 3))
        field[0, 0] = [-1.0, 0.0, 1.0]
        path = images.save_field_image(str(tmp_path / "f.png"), field)
        from PIL import Image

        pixels = np.asarray(Image.open(path))
        assert pixels[0, 0].tolist() == [0, 128, 255]

    def test_boundary_image_binarizes(self, tmp_path):
        bmap = np.array([[0, 1], [2, 0]], dtype=np.uint8)
        path = images.save_boundary_image(str(tmp_path / "b.png"), bmap)
        from PIL import Image

        pixels = np.asarray(Image.open(path))
        assert pixels.tolist() == [[0, 255], [255, 0]]

    def test_bad_shapes_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="uint8"):
            images.save_image(str(tmp_path / "x.png"), np.zeros((2, 2)))
        with pytest.raises(ConfigError, match="channels"):
            images.save_field_image(
                str(tmp_path / "x.png"), np.zeros((2, 2, 4))
            )


def run_cli(workdir, *args, env_extra=None):
    env = dict(os.environ, GRAINFUSE_WORKERS="1")
    if env_extra:
        env.update(env_extra)
    return subprocess.run(
        [sys.executable, "-m", "grainfuse.pipeline.cli", *args],
        capture_output=True, text=True, env=env, cwd=workdir,
    )


def tiny_args(*extra):
    args = []
    for override in TINY_OVERRIDES:
        args.extend(["--set", override])
    args.extend(extra)
    return args


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """One CLI-built workspace shared by the command tests: dataset,
    EP and P checkpoints, and one reconstruction condition."""
    root = str(tmp_path_factory.mktemp("cli"))
    steps = [
        ["gen-data", "--workdir", "w"],
        ["train", "--workdir", "w", "--modality", "ep"],
        ["train", "--workdir", "w", "--modality", "e"],
        ["reconstruct", "--workdir", "w", "--slice", "0", "--slice", "1"],
    ]
    for step in steps:
        proc = run_cli(root, *step, *tiny_args())
        assert proc.returncode == 0, proc.stderr + proc.stdout
    return root


class TestCli:
    """End-to-end command behavior through subprocesses."""

    def test_workspace_layout(self, cli_workspace):
        w = os.path.join(cli_workspace, "w")
        assert os.path.exists(os.path.join(w, "dataset", "dataset.json"))
        assert os.path.exists(os.path.join(w, "dataset", "config.yaml"))
        assert os.path.exists(os.path.join(w, "checkpoints", "ep.gftc"))
        assert os.path.exists(os.path.join(w, "checkpoints", "e.gftc"))
        recon_dirs = os.listdir(os.path.join(w, "recon"))
        assert len(recon_dirs) == 1
        files = sorted(os.listdir(os.path.join(w, "recon", recon_dirs[0])))
        assert files == ["config.yaml", "slice_000.gftc", "slice_001.gftc"]

    def test_evaluate_writes_metrics_and_images(self, cli_workspace):
        w = os.path.join(cli_workspace, "w")
        condition = os.listdir(os.path.join(w, "recon"))[0]
        proc = run_cli(
            cli_workspace, "evaluate", "--workdir", "w",
            "--recon", os.path.join("w", "recon", condition), *tiny_args(),
        )
        assert proc.returncode == 0, proc.stderr
        out = os.path.join(w, "eval", condition)
        with open(os.path.join(out, "metrics.csv")) as fh:
            lines = fh.read().strip().splitlines()
        assert len(lines) == 3
        assert lines[0].startswith("condition,slice,")
        for idx in (0, 1):
            for kind in ("gradient", "boundary", "orientation", "denoised"):
                assert os.path.exists(
                    os.path.join(out, f"slice_{idx:03d}_{kind}.png")
                ), kind

    def test_reconstruct_is_reproducible_bitwise(self, cli_workspace,
                                                 tmp_path):
        # same inputs, fresh run elsewhere: identical artifact bytes
        w = os.path.join(cli_workspace, "w")
        w2 = str(tmp_path / "w2")
        os.makedirs(w2)
        shutil.copytree(os.path.join(w, "dataset"),
                        os.path.join(w2, "dataset"))
        shutil.copytree(os.path.join(w, "checkpoints"),
                        os.path.join(w2, "checkpoints"))
        proc = run_cli(
            str(tmp_path), "reconstruct", "--workdir", "w2",
            "--slice", "0", "--slice", "1", *tiny_args(),
        )
        assert proc.returncode == 0, proc.stderr
        condition = os.listdir(os.path.join(w, "recon"))[0]
        for name in ("slice_000.gftc", "slice_001.gftc"):
            with open(os.path.join(w, "recon", condition, name), "rb") as fh:
                a = fh.read()
            with open(os.path.join(w2, "recon", condition, name), "rb") as fh:
                b = fh.read()
            assert a == b, name

    def test_gen_data_twice_is_byte_identical(self, tmp_path):
        for sub in ("a", "b"):
            proc = run_cli(
                str(tmp_path), "gen-data", "--workdir", sub, *tiny_args()
            )
            assert proc.returncode == 0, proc.stderr
        names = sorted(os.listdir(tmp_path / "a" / "dataset"))
        for name in names:
            with open(tmp_path / "a" / "dataset" / name, "rb") as fh:
                a = fh.read()
            with open(tmp_path / "b" / "dataset" / name, "rb") as fh:
                b = fh.read()
            assert a == b, name

    def test_training_is_reproducible_bitwise(self, cli_workspace, tmp_path):
        w = os.path.join(cli_workspace, "w")
        w2 = str(tmp_path / "w2")
        os.makedirs(w2)
        shutil.copytree(os.path.join(w, "dataset"),
                        os.path.join(w2, "dataset"))
        proc = run_cli(
            str(tmp_path), "train", "--workdir", "w2", "--modality", "ep",
            *tiny_args(),
        )
        assert proc.returncode == 0, proc.stderr
        for name in ("ep.gftc", "ep_history.csv"):
            with open(os.path.join(w, "checkpoints", name), "rb") as fh:
                a = fh.read()
            with open(os.path.join(w2, "checkpoints", name), "rb") as fh:
                b = fh.read()
            assert a == b, name

    def test_missing_checkpoint_exits_config_code(self, cli_workspace):
        proc = run_cli(
            cli_workspace, "reconstruct", "--workdir", "w",
            "--modality", "p", "--slice", "0", *tiny_args(),
        )
        assert proc.returncode == 2
        assert "train --modality p" in proc.stderr

    def test_mislabeled_checkpoint_exits_incompatible_code(
        self, cli_workspace, tmp_path
    ):
        w = os.path.join(cli_workspace, "w")
        w2 = str(tmp_path / "w2")
        os.makedirs(os.path.join(w2, "checkpoints"))
        shutil.copytree(os.path.join(w, "dataset"),
                        os.path.join(w2, "dataset"))
        # an EBSD-only checkpoint masquerading as the PL model
        shutil.copy(os.path.join(w, "checkpoints", "e.gftc"),
                    os.path.join(w2, "checkpoints", "p.gftc"))
        proc = run_cli(
            str(tmp_path), "reconstruct", "--workdir", "w2",
            "--modality", "p", "--slice", "0", *tiny_args(),
        )
        assert proc.returncode == 4
        assert "modality" in proc.stderr

    def test_unknown_config_key_exits_config_code(self, cli_workspace):
        proc = run_cli(
            cli_workspace, "gen-data", "--workdir", "w",
            "--set", "dataset.grainz=3",
        )
        assert proc.returncode == 2
        assert "dataset.grainz" in proc.stderr

    def test_bad_mask_spec_exits_config_code(self, cli_workspace):
        proc = run_cli(
            cli_workspace, "reconstruct", "--workdir", "w",
            "--mask", "hexgrid(3)", *tiny_args(),
        )
        assert proc.returncode == 2

    def test_numerical_divergence_maps_to_exit_three(self, monkeypatch):
        def explode(args):
            raise NumericalDivergenceError("particle weights collapsed")

        monkeypatch.setattr(cli, "cmd_gen_data", explode)
        assert cli.main(["gen-data", "--workdir", "x"]) == 3

    def test_sweep_and_plots(self, cli_workspace):
        proc = run_cli(
            cli_workspace, "sweep", "--workdir", "w",
            "--masks", "none,grid(8)", "--n-values", "1,2",
            "--repeats", "1", "--slices", "2", *tiny_args(),
        )
        assert proc.returncode == 0, proc.stderr
        w = os.path.join(cli_workspace, "w")
        rows_path = os.path.join(w, "sweep", "rows.csv")
        with open(rows_path) as fh:
            rows = fh.read().strip().splitlines()
        # header + 2 masks x 2 n x 2 slices
        assert len(rows) == 9
        assert rows[1].startswith("grid(8),1,0,0,")
        proc = run_cli(
            cli_workspace, "plot", "--csv",
            os.path.join(w, "sweep", "summary.csv"),
            "--out", os.path.join(w, "plots"), "--kind", "sweep",
        )
        assert proc.returncode == 0, proc.stderr
        proc = run_cli(
            cli_workspace, "plot", "--csv",
            os.path.join(w, "checkpoints", "ep_history.csv"),
            "--out", os.path.join(w, "plots"), "--kind", "history",
        )
        assert proc.returncode == 0, proc.stderr
        assert os.path.exists(
            os.path.join(w, "plots", "chamfer_total_vs_fraction.png")
        )
        assert os.path.exists(os.path.join(w, "plots", "history.png"))

    def test_resolved_config_written_everywhere(self, cli_workspace):
        w = os.path.join(cli_workspace, "w")
        for sub in ("dataset", "checkpoints", "sweep"):
            path = os.path.join(w, sub, "config.yaml")
            assert os.path.exists(path), sub
            cfg = config.load_config(path)
            assert cfg["dataset"]["n_grains"] == 25
            assert cfg["train"]["seed"] == 0
