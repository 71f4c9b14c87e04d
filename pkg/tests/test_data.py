import json

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from unsq.data import (DatasetError, DatasetManifest, DimensionError, HashMismatchError,
                       MissingFileError, NonBinaryMaskError, SynthConfig,
                       UnreachableFractionError, batch_iterator, generate_splits,
                       generate_synthetic, load_dataset, read_pgm, read_soft_raster,
                       synth_config_from_dict, write_manifest, write_pgm, write_soft_raster)
from unsq.distill import compute_class_weight


def small_cfg(**kw):
    base = dict(num_images=6, height=32, width=32, foreground_fraction=0.08, seed=3)
    base.update(kw)
    return SynthConfig(**base)


def recount(root):
    """Foreground/background straight from the PGM bytes."""
    doc = json.loads((root / "manifest.json").read_text())
    fg = sum(int((read_pgm(root / e["mask"]) == 255).sum()) for e in doc["entries"])
    total = sum(e["h"] * e["w"] for e in doc["entries"])
    return fg, total - fg


class TestPgm:
    def test_round_trip(self, tmp_path):
        px = np.random.default_rng(0).integers(0, 256, size=(16, 48), dtype=np.uint8)
        write_pgm(tmp_path / "a.pgm", px)
        assert np.array_equal(read_pgm(tmp_path / "a.pgm"), px)

    def test_header_comment(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
        assert read_pgm(tmp_path / "c.pgm").tolist() == [[0, 255]]

    def test_rejects_ascii_pgm(self, tmp_path):
        (tmp_path / "p2.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
        with pytest.raises(DatasetError, match="P5"):
            read_pgm(tmp_path / "p2.pgm")

    def test_truncated_body(self, tmp_path):
        (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\n\x00\x00")
        with pytest.raises(DatasetError, match="truncated"):
            read_pgm(tmp_path / "t.pgm")


class TestSoftRaster:
    def test_round_trip_bit_exact(self, tmp_path):
        p = np.random.default_rng(1).random((2, 16, 16))
        write_soft_raster(tmp_path / "s.soft", p)
        assert np.array_equal(read_soft_raster(tmp_path / "s.soft"), p)

    def test_truncated(self, tmp_path):
        write_soft_raster(tmp_path / "s.soft", np.zeros((2, 4, 4)))
        data = (tmp_path / "s.soft").read_bytes()
        (tmp_path / "s.soft").write_bytes(data[:-8])
        with pytest.raises(DatasetError):
            read_soft_raster(tmp_path / "s.soft")


class TestGenerator:
    def test_default_fraction_gives_weight_17_8(self, tmp_path):
        m = generate_synthetic(SynthConfig(num_images=32), tmp_path)
        w = compute_class_weight(m).w_f
        fg, bg = recount(tmp_path / "train")
        assert w == pytest.approx(bg / fg, rel=1e-12)
        assert 14.2 <= w <= 22.3

    def test_noiseless_threshold_recovers_mask(self, tmp_path):
        cfg = small_cfg(noise_std=0.0, blob_intensity=1.0, background_mean=0.0,
                        background_variation=0.0, texture_amplitude=0.0, decoys=(0, 0))
        generate_synthetic(cfg, tmp_path)
        ds = load_dataset(tmp_path / "train")
        assert np.array_equal(ds.images > 0.5, ds.masks.astype(bool))

    def test_same_seed_same_hash(self, tmp_path):
        a = generate_synthetic(small_cfg(), tmp_path / "a")
        b = generate_synthetic(small_cfg(), tmp_path / "b")
        assert a.content_hash == b.content_hash
        c = generate_synthetic(small_cfg(seed=4), tmp_path / "c")
        assert c.content_hash != a.content_hash

    def test_identical_bytes(self, tmp_path):
        generate_synthetic(small_cfg(), tmp_path / "a")
        generate_synthetic(small_cfg(), tmp_path / "b")
        for f in sorted((tmp_path / "a" / "train").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / "train" / f.name).read_bytes()

    def test_splits_differ(self, tmp_path):
        splits = generate_splits(small_cfg(), tmp_path, num_test=3)
        assert len(splits["test"]) == 3
        assert splits["test"].content_hash != splits["train"].content_hash
        assert splits["test"].generator["seed"] == 4

    def test_unreachable_fraction(self):
        with pytest.raises(UnreachableFractionError):
            SynthConfig(foreground_fraction=0.45, max_blobs=2, blob_radius=(3, 5)).validate()
        with pytest.raises(UnreachableFractionError):
            SynthConfig(height=16, width=16, foreground_fraction=0.001).validate()

    @pytest.mark.parametrize("kw", [dict(foreground_fraction=0.5), dict(foreground_fraction=0.0),
                                    dict(height=40), dict(blob_radius=(5, 40)), dict(num_images=0)])
    def test_invalid_config(self, kw):
        with pytest.raises((ValueError, DatasetError)):
            SynthConfig(**kw).validate()

    def test_config_from_manifest_dict(self, tmp_path):
        m = generate_synthetic(small_cfg(), tmp_path)
        assert synth_config_from_dict(m.generator) == small_cfg()

    @settings(max_examples=12, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(f=st.floats(0.02, 0.4), seed=st.integers(0, 2**16), n=st.integers(2, 6))
    def test_weight_tracks_fraction(self, tmp_path_factory, f, seed, n):
        root = tmp_path_factory.mktemp("synth")
        cfg = SynthConfig(num_images=n, height=48, width=48, foreground_fraction=f,
                          max_blobs=40, blob_radius=(3.0, 12.0), seed=seed)
        m = generate_synthetic(cfg, root)
        assert (m.foreground, m.background) == recount(root / "train")
        ds = load_dataset(root / "train")
        assert set(np.unique(ds.masks)) <= {0.0, 1.0}
        assert compute_class_weight(m).w_f == pytest.approx((1 - f) / f, rel=0.2)


class TestLoad:
    def test_round_trip_pixel_exact(self, tmp_path):
        m = generate_synthetic(small_cfg(), tmp_path)
        ds = load_dataset(m.path)
        assert ds.images.shape == ds.masks.shape == (6, 1, 32, 32)
        for i, e in enumerate(m.entries):
            assert np.array_equal(np.round(ds.images[i, 0] * 255).astype(np.uint8),
                                  read_pgm(tmp_path / "train" / e["image"]))
        assert ds.foreground == m.foreground == recount(tmp_path / "train")[0]
        assert 0 <= ds.images.min() and ds.images.max() <= 1

    def test_directory_or_file(self, tmp_path):
        generate_synthetic(small_cfg(), tmp_path)
        a = load_dataset(tmp_path / "train")
        b = load_dataset(tmp_path / "train" / "manifest.json")
        assert np.array_equal(a.images, b.images)

    def test_non_binary_mask(self, tmp_path):
        m = generate_synthetic(small_cfg(), tmp_path)
        mask = read_pgm(tmp_path / "train" / m.entries[0]["mask"])
        mask[0, 0] = 128
        write_pgm(tmp_path / "train" / m.entries[0]["mask"], mask)
        with pytest.raises(NonBinaryMaskError, match="non-binary"):
            load_dataset(m.path)

    def test_missing_file(self, tmp_path):
        m = generate_synthetic(small_cfg(), tmp_path)
        (tmp_path / "train" / m.entries[2]["image"]).unlink()
        with pytest.raises(MissingFileError):
            load_dataset(m.path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingFileError):
            load_dataset(tmp_path / "nowhere")

    def test_hash_mismatch(self, tmp_path):
        m = generate_synthetic(small_cfg(), tmp_path)
        img = read_pgm(tmp_path / "train" / m.entries[1]["image"])
        img[3, 3] ^= 1
        write_pgm(tmp_path / "train" / m.entries[1]["image"], img)
        with pytest.raises(HashMismatchError):
            load_dataset(m.path)

    def test_indivisible_dims(self, tmp_path):
        write_pgm(tmp_path / "i.pgm", np.zeros((24, 32), np.uint8))
        write_pgm(tmp_path / "m.pgm", np.zeros((24, 32), np.uint8))
        with pytest.raises(DimensionError):
            write_manifest(tmp_path, "train", [("i.pgm", "m.pgm")])

    def test_error_types_are_distinct(self):
        kinds = {MissingFileError, NonBinaryMaskError, HashMismatchError, DimensionError}
        assert len(kinds) == 4 and all(issubclass(k, DatasetError) for k in kinds)

    def test_ingest_external_pairs(self, tmp_path):
        rng = np.random.default_rng(0)
        write_pgm(tmp_path / "img.pgm", rng.integers(0, 256, (16, 16), dtype=np.uint8))
        write_pgm(tmp_path / "msk.pgm", (rng.random((16, 16)) > 0.9).astype(np.uint8) * 255)
        m = write_manifest(tmp_path, "test", [("img.pgm", "msk.pgm")])
        assert DatasetManifest.read(tmp_path).content_hash == m.content_hash
        assert load_dataset(tmp_path).foreground == m.foreground

    def test_stats_disagreement(self, tmp_path):
        m = generate_synthetic(small_cfg(), tmp_path)
        doc = json.loads(m.path.read_text())
        doc["stats"]["foreground"] += 1
        m.path.write_text(json.dumps(doc))
        with pytest.raises(DatasetError, match="statistics"):
            load_dataset(m.path)


class TestBatches:
    @pytest.fixture
    def ds(self, tmp_path):
        generate_synthetic(small_cfg(num_images=10), tmp_path)
        return load_dataset(tmp_path / "train")

    def test_sizes(self, ds):
        assert [len(b.indices) for b in batch_iterator(ds, 4, seed=0)] == [4, 4, 2]

    def test_no_shuffle_is_manifest_order(self, ds):
        idx = np.concatenate([b.indices for b in batch_iterator(ds, 3, shuffle=False)])
        assert idx.tolist() == list(range(10))

    def test_epochs_differ_and_replay(self, ds):
        def order(epoch):
            return np.concatenate([b.indices for b in batch_iterator(ds, 4, seed=9, epoch=epoch)])

        e0, e1 = order(0), order(1)
        assert sorted(e0) == sorted(e1) == list(range(10))
        assert not np.array_equal(e0, e1)
        assert np.array_equal(e0, order(0)) and np.array_equal(e1, order(1))

    def test_batch_contents(self, ds):
        b = next(batch_iterator(ds, 4, seed=2))
        assert np.array_equal(b.images, ds.images[b.indices])
        assert np.array_equal(b.masks, ds.masks[b.indices])

    def test_bad_batch_size(self, ds):
        with pytest.raises(ValueError):
            next(batch_iterator(ds, 0))
