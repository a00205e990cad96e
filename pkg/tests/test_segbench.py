import hashlib
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from barrier_ext.constraints import ConstraintSetting, CoordGrid, bounds_from_gt, canonicalize
from barrier_ext.autodiff import Tape
from barrier_ext.barriers import ConstraintHandlerKind
from barrier_ext.optimize import OptimizerConfig, init_state, train_algorithm1
from barrier_ext.segbench import (
    EvalBatch,
    PixelModelConfig,
    PlacementError,
    SegItem,
    SegProblem,
    SynthConfig,
    dice,
    disk_mask,
    forward_softmax,
    generate_dataset,
    init_pixel_model,
    load_dataset,
    mean_dice,
    model_softmax,
    pixel_features,
    predict_mask,
    prepare_items,
    read_pgm8_mask,
    read_pgm16,
    run_experiment,
    synth_image,
    write_pgm8_mask,
    write_pgm16,
)


def brute_force_disk_count(radius: int) -> int:
    return sum(
        1
        for dx in range(-radius, radius + 1)
        for dy in range(-radius, radius + 1)
        if dx * dx + dy * dy <= radius * radius
    )


class TestDiskGeometry:
    def test_radius_10_disk_has_317_pixels(self):
        assert brute_force_disk_count(10) == 317
        assert int(disk_mask(64, 30, 30, 10).sum()) == 317

    @pytest.mark.parametrize("radius", [1, 3, 7, 17])
    def test_disk_count_matches_lattice_oracle(self, radius):
        assert int(disk_mask(64, 32, 32, radius).sum()) == brute_force_disk_count(radius)


class TestSynthImages:
    def test_noiseless_image_has_three_intensities(self):
        cfg = SynthConfig(n_train=4, n_val=0, noise_sigmas=(0.0,), seed=1)
        image, mask, meta = synth_image(cfg, 0)
        assert sorted(np.unique(image)) == [0.3, 0.7, 1.0]
        assert int(mask.sum()) == 317
        assert meta["sigma"] == 0.0

    def test_mask_is_the_darker_circle(self):
        cfg = SynthConfig(n_train=1, n_val=0, noise_sigmas=(0.0,), seed=5)
        image, mask, _ = synth_image(cfg, 0)
        assert np.all(image[mask] == 0.3)

    def test_circles_do_not_overlap(self):
        cfg = SynthConfig(n_train=0, n_val=0, seed=9)
        for index in range(30):
            _, _, meta = synth_image(cfg, index)
            (x1, y1), (x2, y2) = meta["dark_center"], meta["bright_center"]
            assert math.hypot(x1 - x2, y1 - y2) > 2 * cfg.radius

    def test_circles_fully_inside_frame(self):
        cfg = SynthConfig(n_train=0, n_val=0, seed=2)
        for index in range(20):
            _, mask, meta = synth_image(cfg, index)
            for cx, cy in (meta["dark_center"], meta["bright_center"]):
                assert cfg.radius <= cx <= cfg.image_size - 1 - cfg.radius
                assert cfg.radius <= cy <= cfg.image_size - 1 - cfg.radius

    def test_noise_sigma_cycles(self):
        cfg = SynthConfig(n_train=0, n_val=0, seed=3)
        sigmas = [synth_image(cfg, i)[2]["sigma"] for i in range(6)]
        assert sigmas == [0.0, 0.03, 0.06, 0.0, 0.03, 0.06]

    def test_determinism_per_index(self):
        cfg = SynthConfig(seed=11)
        a = synth_image(cfg, 7)
        b = synth_image(cfg, 7)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_oversized_radius_fails_placement(self):
        with pytest.raises((PlacementError, ValueError)):
            cfg = SynthConfig(image_size=32, radius=15)
            synth_image(cfg, 0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SynthConfig(dark=0.8, bright=0.4)


class TestPgmIO:
    def test_image_roundtrip_16bit(self, tmp_path):
        rng = np.random.default_rng(0)
        image = rng.uniform(0.0, 1.0, size=(9, 7))
        path = tmp_path / "x.img.pgm"
        write_pgm16(path, image)
        back = read_pgm16(path)
        assert back.shape == (9, 7)
        np.testing.assert_allclose(back, image, atol=0.5 / 65535)

    def test_16bit_values_survive(self, tmp_path):
        image = np.array([[0.0, 0.5, 1.0]])
        path = tmp_path / "g.pgm"
        write_pgm16(path, image)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n3 1\n65535\n")
        assert read_pgm16(path)[0, 2] == 1.0

    def test_mask_roundtrip(self, tmp_path):
        mask = np.array([[True, False], [False, True]])
        path = tmp_path / "m.mask.pgm"
        write_pgm8_mask(path, mask)
        np.testing.assert_array_equal(read_pgm8_mask(path), mask)


class TestGenerateDataset:
    def test_writes_expected_layout(self, tmp_path):
        cfg = SynthConfig(n_train=3, n_val=2, seed=4)
        manifest_path = generate_dataset(cfg, tmp_path / "data")
        assert manifest_path.name == "manifest.json"
        data = load_dataset(tmp_path / "data")
        assert len(data["train"]) == 3
        assert len(data["val"]) == 2
        item = data["train"][0]
        assert item.image.shape == (64, 64)
        assert item.mask.dtype == bool
        assert int(item.mask.sum()) == 317

    def test_regeneration_is_byte_identical(self, tmp_path):
        cfg = SynthConfig(n_train=3, n_val=1, seed=8)

        def digest(root: Path) -> dict:
            return {
                p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
                for p in sorted(root.rglob("*"))
                if p.is_file()
            }

        generate_dataset(cfg, tmp_path / "a")
        generate_dataset(cfg, tmp_path / "b")
        assert digest(tmp_path / "a") == digest(tmp_path / "b")

    def test_every_mask_satisfies_its_own_bounds(self, tmp_path):
        cfg = SynthConfig(n_train=6, n_val=0, seed=12)
        generate_dataset(cfg, tmp_path / "d")
        data = load_dataset(tmp_path / "d")
        grid = CoordGrid(64, 64)
        for item in data["train"]:
            specs = bounds_from_gt(item.mask, grid, ConstraintSetting.SIZE_AND_CENTROID)
            tape = Tape()
            s = np.zeros((grid.n_pixels, 2))
            s[:, 1] = item.mask.reshape(-1).astype(float)
            s[:, 0] = 1.0 - s[:, 1]
            sv = tape.leaf(s)
            for spec in specs:
                for f in canonicalize(spec, sv, grid):
                    assert f.item() <= 1e-9


class TestDice:
    def test_identical_masks(self):
        mask = disk_mask(32, 10, 12, 5)
        assert dice(mask, mask) == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((8, 8), dtype=bool)
        b = np.zeros((8, 8), dtype=bool)
        a[0, 0] = True
        b[7, 7] = True
        assert dice(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros(200, dtype=bool)
        b = np.zeros(200, dtype=bool)
        a[:100] = True
        b[50:150] = True
        assert dice(a, b) == 0.5

    def test_both_empty_convention(self):
        assert dice(np.zeros((4, 4), dtype=bool), np.zeros((4, 4), dtype=bool)) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice(np.zeros((2, 2), dtype=bool), np.zeros((3, 3), dtype=bool))

    @given(data=st.data())
    @settings(max_examples=50)
    def test_symmetry_and_range(self, data):
        n = data.draw(st.integers(min_value=1, max_value=64))
        a = np.array(data.draw(st.lists(st.booleans(), min_size=n, max_size=n)))
        b = np.array(data.draw(st.lists(st.booleans(), min_size=n, max_size=n)))
        assert dice(a, b) == dice(b, a)
        assert 0.0 <= dice(a, b) <= 1.0


class TestPixelModel:
    def test_feature_shape_and_range(self):
        cfg = SynthConfig(seed=0)
        image, _, _ = synth_image(cfg, 0)
        feats = pixel_features(image)
        assert feats.shape == (64 * 64, 5)
        assert feats[:, 3].min() == 0.0 and feats[:, 3].max() == 1.0
        assert np.all(feats[:, 2] >= 0.0)  # local std

    def test_local_mean_of_constant_image(self):
        feats = pixel_features(np.full((8, 8), 0.25))
        np.testing.assert_allclose(feats[:, 0], 0.25)
        np.testing.assert_allclose(feats[:, 1], 0.25)
        np.testing.assert_allclose(feats[:, 2], 0.0, atol=1e-12)

    def test_zero_weights_predict_all_background(self):
        cfg = PixelModelConfig()
        params = {k: np.zeros_like(v) for k, v in init_pixel_model(cfg, 0).items()}
        feats = pixel_features(np.full((8, 8), 0.5))
        mask, s = predict_mask(params, feats, cfg, (8, 8))
        np.testing.assert_allclose(s, 0.5)
        assert not mask.any()  # ties break toward background

    def test_softmax_rows_sum_to_one_on_random_weights(self):
        cfg = PixelModelConfig()
        params = init_pixel_model(cfg, 3)
        feats = pixel_features(synth_image(SynthConfig(seed=2), 0)[0])
        s = forward_softmax(params, feats, cfg)
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)

    def test_tape_forward_matches_numpy_forward(self):
        cfg = PixelModelConfig()
        params = init_pixel_model(cfg, 1)
        feats = pixel_features(synth_image(SynthConfig(seed=1), 0)[0])[:50]
        tape = Tape()
        pv = {k: tape.leaf(v) for k, v in params.items()}
        s_tape = model_softmax(tape, pv, tape.constant(feats), cfg)
        s_np = forward_softmax(params, feats, cfg)
        np.testing.assert_allclose(s_tape.value, s_np, rtol=1e-12)

    def test_eval_batch_matches_per_item_dice(self):
        cfg = SynthConfig(n_train=5, n_val=0, seed=6)
        items = [SegItem(str(i), *synth_image(cfg, i)[:2], 0.0) for i in range(5)]
        grid = CoordGrid(64, 64)
        prepared = prepare_items(items, ConstraintSetting.SIZE_ONLY, grid)
        model_cfg = PixelModelConfig()
        params = init_pixel_model(model_cfg, 2)
        batched = EvalBatch(prepared, model_cfg).mean_dice(params)
        looped = mean_dice(params, prepared, model_cfg, (64, 64))
        assert batched == looped

    def test_supervised_overfit_on_one_noiseless_image(self):
        # fully labeled single image: the model should nail it (sanity for
        # the feature set and the optimizer wiring)
        from barrier_ext.optimize import partial_cross_entropy

        cfg = SynthConfig(noise_sigmas=(0.0,), seed=21)
        image, mask, _ = synth_image(cfg, 0)
        feats = pixel_features(image)
        labels = np.zeros((feats.shape[0], 2))
        labels[:, 1] = mask.reshape(-1)
        labels[:, 0] = 1.0 - labels[:, 1]
        model_cfg = PixelModelConfig()

        class Supervised:
            n_items = 1

            def build(self, tape, params, item):
                s = model_softmax(tape, params, tape.constant(feats), model_cfg)
                return partial_cross_entropy(s, labels, np.arange(feats.shape[0])), []

        opt = OptimizerConfig(method="adam", learning_rate=1e-2, epochs=150, seed=0)
        state = init_state(init_pixel_model(model_cfg, 0), opt)
        state, _ = train_algorithm1(state, Supervised(), opt)
        pred, _ = predict_mask(state.params, feats, model_cfg, (64, 64))
        assert dice(pred, mask) > 0.99


class TestRunExperiment:
    def test_zero_epochs_summarizes_initial_model(self):
        cfg = SynthConfig(n_train=2, n_val=2, seed=13)
        items = [SegItem(str(i), *synth_image(cfg, i)[:2], 0.0) for i in range(4)]
        res = run_experiment(
            items[:2],
            items[2:],
            ConstraintSetting.SIZE_ONLY,
            ConstraintHandlerKind.QUADRATIC_PENALTY,
            OptimizerConfig(method="adam", learning_rate=1e-3, epochs=0, seed=0),
        )
        assert res.rows == []
        assert math.isfinite(res.final_val_dice)

    def test_rows_carry_metric_columns(self):
        cfg = SynthConfig(n_train=3, n_val=2, seed=14)
        items = [SegItem(str(i), *synth_image(cfg, i)[:2], 0.0) for i in range(5)]
        res = run_experiment(
            items[:3],
            items[3:],
            ConstraintSetting.SIZE_AND_CENTROID,
            ConstraintHandlerKind.LOG_BARRIER_EXTENSION,
            OptimizerConfig(method="adam", learning_rate=1e-3, epochs=3, seed=0),
        )
        assert len(res.rows) == 3
        for row in res.rows:
            for key in ("epoch", "t", "data_loss", "constraint_loss", "mean_violation",
                        "max_violation", "train_dice", "val_dice"):
                assert key in row
        assert res.rows[1]["t"] == pytest.approx(5.5)

    def test_experiment_determinism(self):
        cfg = SynthConfig(n_train=3, n_val=2, seed=15)
        items = [SegItem(str(i), *synth_image(cfg, i)[:2], 0.0) for i in range(5)]

        def run():
            return run_experiment(
                items[:3],
                items[3:],
                ConstraintSetting.SIZE_AND_CENTROID,
                ConstraintHandlerKind.RELU_PENALTY,
                OptimizerConfig(method="adam", learning_rate=1e-3, epochs=4, seed=3),
            )

        a, b = run(), run()
        assert a.rows == b.rows
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])
