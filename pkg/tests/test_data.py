import numpy as np
import pytest

from tsinsight.data import (
    DataError,
    Dataset,
    NormStats,
    SynthConfig,
    batch_iter,
    generate_synthetic_anomaly,
    load_csv_dataset,
    normalize,
    normalize_bundle,
    save_csv_dataset,
)


@pytest.fixture(scope="module")
def synth():
    cfg = SynthConfig(train_size=400, val_size=100, test_size=200, length=30, seed=3)
    return generate_synthetic_anomaly(cfg)


class TestGenerator:
    def test_reproducible_bit_identical(self):
        cfg = SynthConfig(train_size=50, val_size=20, test_size=20, length=16, seed=7)
        a = generate_synthetic_anomaly(cfg)
        b = generate_synthetic_anomaly(cfg)
        assert np.array_equal(a.train.inputs, b.train.inputs)
        assert np.array_equal(a.test.labels, b.test.labels)

    def test_splits_differ(self, synth):
        assert not np.array_equal(
            synth.train.inputs[: synth.val.size], synth.val.inputs
        )

    def test_anomalies_touch_one_to_three_points_never_pressure(self):
        cfg = SynthConfig(train_size=300, val_size=20, test_size=20, length=24, seed=5)
        bundle = generate_synthetic_anomaly(cfg)
        clean = generate_synthetic_anomaly(
            SynthConfig(train_size=300, val_size=20, test_size=20, length=24, seed=5,
                        spike_magnitude=0.0)
        )
        diff = bundle.train.inputs != clean.train.inputs
        for i in range(bundle.train.size):
            changed = int(diff[i].sum())
            if bundle.train.labels[i] == 1:
                assert 1 <= changed <= 3
                assert not diff[i, 0].any()  # pressure untouched
            else:
                assert changed == 0

    def test_label_one_iff_spiked(self, synth):
        # balance is exact by construction
        expected = int(round(0.5 * synth.train.size))
        assert int(synth.train.labels.sum()) == expected

    def test_pressure_channel_distribution_matches_between_classes(self):
        cfg = SynthConfig(train_size=10000, val_size=20, test_size=20, length=30, seed=2)
        train = generate_synthetic_anomaly(cfg).train
        pressure = train.inputs[:, 0, :].mean(axis=1)
        pos, neg = pressure[train.labels == 1], pressure[train.labels == 0]
        pooled_se = np.sqrt(pos.var() / pos.size + neg.var() / neg.size)
        assert abs(pos.mean() - neg.mean()) < 3.0 * pooled_se

    def test_invalid_config_rejected(self):
        with pytest.raises(DataError, match="anomaly_rate"):
            generate_synthetic_anomaly(SynthConfig(anomaly_rate=0.0))


class TestCsv:
    def test_round_trip_bit_identical_in_float32(self, synth, tmp_path):
        save_csv_dataset(synth, tmp_path)
        loaded = load_csv_dataset(tmp_path)
        for split in ("train", "val", "test"):
            a, b = getattr(synth, split), getattr(loaded, split)
            assert np.array_equal(a.inputs.astype(np.float32), b.inputs.astype(np.float32))
            assert np.array_equal(a.labels, b.labels)
            assert b.class_count == 2

    def test_small_file_shape(self, tmp_path):
        (tmp_path / "train.csv").write_text(
            "# shape 2 1 4 2\nlabel,c0_t0,c0_t1,c0_t2,c0_t3\n0,1,2,3,4\n1,5,6,7,8\n"
        )
        for split in ("val", "test"):
            (tmp_path / f"{split}.csv").write_text(
                "# shape 1 1 4 2\nlabel,c0_t0,c0_t1,c0_t2,c0_t3\n0,1,2,3,4\n"
            )
        bundle = load_csv_dataset(tmp_path)
        assert bundle.train.inputs.shape == (2, 1, 4)

    def test_ragged_row_names_line(self, tmp_path):
        (tmp_path / "train.csv").write_text(
            "# shape 1 1 4 2\nlabel,a,b,c,d\n0,1,2,3,4,5\n"
        )
        with pytest.raises(DataError, match=r"train\.csv:3: ragged row"):
            load_csv_dataset(tmp_path)

    def test_non_numeric_cell_names_line(self, tmp_path):
        (tmp_path / "train.csv").write_text("# shape 1 1 2 2\nlabel,a,b\n0,1,oops\n")
        with pytest.raises(DataError, match=r":3: non-numeric"):
            load_csv_dataset(tmp_path)

    def test_label_outside_class_count(self, tmp_path):
        (tmp_path / "train.csv").write_text("# shape 1 1 2 2\nlabel,a,b\n5,1,2\n")
        with pytest.raises(DataError, match="label 5 outside"):
            load_csv_dataset(tmp_path)

    def test_missing_header(self, tmp_path):
        (tmp_path / "train.csv").write_text("label,a,b\n0,1,2\n")
        with pytest.raises(DataError, match="missing '# shape"):
            load_csv_dataset(tmp_path)


class TestNormalize:
    def test_train_split_is_zero_mean_unit_std(self, synth):
        normalized, stats = normalize(synth.train)
        assert np.abs(normalized.inputs.mean(axis=(0, 2))).max() < 1e-6
        assert np.abs(normalized.inputs.std(axis=(0, 2)) - 1.0).max() < 1e-6
        assert stats.source_split == "train"

    def test_val_and_test_use_train_stats(self, synth):
        bundle, stats = normalize_bundle(synth)
        # val stats are the train ones, so val mean is close to but not exactly 0
        assert bundle.val.normalization is stats
        assert 0 < np.abs(bundle.val.inputs.mean(axis=(0, 2))).max() < 0.5

    def test_non_train_stats_rejected(self, synth):
        bad = NormStats(np.zeros(3), np.ones(3), source_split="test")
        with pytest.raises(DataError, match="refusing to apply 'test'"):
            normalize(synth.train, bad)

    def test_stats_only_computed_from_train(self, synth):
        with pytest.raises(DataError, match="train split"):
            normalize(synth.val)

    def test_constant_channel_passthrough(self):
        inputs = np.stack([np.zeros((5, 8)), np.arange(40.0).reshape(5, 8)], axis=1)
        ds = Dataset(inputs, np.zeros(5, dtype=int), "train", class_count=2)
        out, stats = normalize(ds)
        assert stats.passthrough == [True, False]
        np.testing.assert_array_equal(out.inputs[:, 0], inputs[:, 0])


class TestBatching:
    def test_seeded_shuffle_identical(self, synth):
        a = [y for _, y in batch_iter(synth.train, 32, True, seed=5)]
        b = [y for _, y in batch_iter(synth.train, 32, True, seed=5)]
        for ya, yb in zip(a, b):
            assert np.array_equal(ya, yb)

    def test_epochs_reshuffle(self, synth):
        a = next(iter(batch_iter(synth.train, 32, True, seed=5, epoch=0)))[1]
        b = next(iter(batch_iter(synth.train, 32, True, seed=5, epoch=1)))[1]
        assert not np.array_equal(a, b)

    def test_short_final_batch_retained(self, synth):
        batches = list(batch_iter(synth.train, 48, False))
        assert sum(x.shape[0] for x, _ in batches) == synth.train.size
        assert batches[-1][0].shape[0] == synth.train.size % 48
