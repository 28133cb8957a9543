"""Dataset plumbing: indexing and mismatch reporting, PNG round trips, patch
sampling determinism and uniformity, dihedral augmentation laws, and the
synthetic relighting generator."""

import numpy as np
import pytest

from lightnorm.data import (
    DIHEDRAL_COUNT,
    PatchPair,
    PatchStream,
    apply_dihedral,
    augment,
    generate_pair,
    index_dataset,
    load_image,
    load_mask,
    sample_patch,
    save_image,
    synth_dataset,
)
from lightnorm.errors import InputError


def _write_pair(root, name, h=32, w=32, seed=0):
    rng = np.random.default_rng(seed)
    save_image(root / "degraded" / name, rng.random((h, w, 3)))
    save_image(root / "gt" / name, rng.random((h, w, 3)))


class TestIo:
    def test_8bit_round_trip(self, tmp_path):
        img = np.random.default_rng(0).random((16, 20, 3))
        path = tmp_path / "x.png"
        save_image(path, img, 8)
        back = load_image(path)
        assert back.shape == (16, 20, 3)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-6

    def test_16bit_round_trip(self, tmp_path):
        img = np.random.default_rng(1).random((12, 12, 3))
        path = tmp_path / "x16.png"
        save_image(path, img, 16)
        back = load_image(path)
        assert np.abs(back - img).max() <= 0.5 / 65535 + 1e-7

    def test_bad_depth(self, tmp_path):
        with pytest.raises(InputError):
            save_image(tmp_path / "bad.png", np.zeros((4, 4, 3)), 12)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            load_image(tmp_path / "nope.png")


class TestIndexing:
    def test_matched_plus_orphan(self, tmp_path):
        for i in range(3):
            _write_pair(tmp_path, f"p{i}.png", seed=i)
        save_image(tmp_path / "degraded" / "orphan.png", np.zeros((8, 8, 3)))
        with pytest.warns(UserWarning, match="unmatched degraded file: orphan.png"):
            records = index_dataset(tmp_path)
        assert [r.name for r in records] == ["p0.png", "p1.png", "p2.png"]

    def test_empty_root(self, tmp_path):
        assert index_dataset(tmp_path) == []

    def test_resolution_mismatch_rejected(self, tmp_path):
        _write_pair(tmp_path, "ok.png")
        save_image(tmp_path / "degraded" / "bad.png", np.zeros((8, 8, 3)))
        save_image(tmp_path / "gt" / "bad.png", np.zeros((10, 8, 3)))
        with pytest.warns(UserWarning, match=r"\(8, 8\).*\(10, 8\)"):
            records = index_dataset(tmp_path)
        assert [r.name for r in records] == ["ok.png"]

    def test_masks_attached(self, synth_records):
        assert all(r.mask_path is not None for r in synth_records)
        assert load_mask(synth_records[0].mask_path).dtype == bool


class TestPatchSampling:
    def test_full_image_when_exact_size(self, synth_records):
        rng = np.random.default_rng(0)
        pair = sample_patch(synth_records[0], rng, patch=64)
        assert pair.degraded.shape == (64, 64, 3)
        assert np.array_equal(pair.degraded, load_image(synth_records[0].degraded_path))

    def test_deterministic_given_state(self, tmp_path):
        _write_pair(tmp_path, "big.png", h=256, w=192, seed=3)
        record = index_dataset(tmp_path)[0]
        a = sample_patch(record, np.random.default_rng(11), patch=64)
        b = sample_patch(record, np.random.default_rng(11), patch=64)
        assert np.array_equal(a.degraded, b.degraded)
        assert np.array_equal(a.gt, b.gt)

    def test_undersized_reflect_padded(self, tmp_path):
        _write_pair(tmp_path, "small.png", h=20, w=24, seed=4)
        record = index_dataset(tmp_path)[0]
        pair = sample_patch(record, np.random.default_rng(0), patch=48)
        assert pair.degraded.shape == (48, 48, 3)

    def test_crop_coordinates_uniform(self, tmp_path):
        # chi-square test over top-left coordinates on a 3x3 grid of offsets
        _write_pair(tmp_path, "u.png", h=10, w=10, seed=5)
        record = index_dataset(tmp_path)[0]
        deg = load_image(record.degraded_path)
        rng = np.random.default_rng(123)
        counts = np.zeros((3, 3))
        draws = 10_000
        for _ in range(draws):
            pair = sample_patch(record, rng, patch=8)
            # recover offsets by matching the unique crop content
            for ty in range(3):
                for tx in range(3):
                    if np.array_equal(pair.degraded, deg[ty:ty + 8, tx:tx + 8]):
                        counts[ty, tx] += 1
        assert counts.sum() == draws
        expected = draws / 9
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        assert chi2 < 26.12  # 99.9th percentile of chi2 with 8 dof

    def test_lockstep_crop(self, tmp_path):
        # gt encodes coordinates so identical crops are verifiable
        h = w = 40
        coords = np.mgrid[0:h, 0:w].transpose(1, 2, 0) / 40.0
        gt = np.concatenate([coords, np.zeros((h, w, 1))], axis=2)
        save_image(tmp_path / "gt" / "c.png", gt)
        save_image(tmp_path / "degraded" / "c.png", gt * 0.5)
        record = index_dataset(tmp_path)[0]
        pair = sample_patch(record, np.random.default_rng(7), patch=16)
        assert np.abs(pair.degraded - pair.gt * 0.5).max() < 3 / 255


class TestAugment:
    def test_eight_distinct_transforms(self):
        marker = np.arange(16, dtype=np.float32).reshape(4, 4, 1).repeat(3, axis=2)
        outs = [apply_dihedral(marker, t).tobytes() for t in range(DIHEDRAL_COUNT)]
        assert len(set(outs)) == 8

    def test_identity_draw(self):
        pair = PatchPair(np.ones((4, 4, 3), np.float32), np.ones((4, 4, 3), np.float32))
        class _Rng:
            def integers(self, lo, hi):
                return 0
        out = augment(pair, _Rng())
        assert np.array_equal(out.degraded, pair.degraded)

    def test_hflip_involution(self):
        img = np.random.default_rng(8).random((6, 6, 3)).astype(np.float32)
        flipped = apply_dihedral(apply_dihedral(img, 4), 4)
        assert np.array_equal(flipped, img)

    def test_frequencies_uniform(self):
        rng = np.random.default_rng(9)
        draws = 100_000
        counts = np.bincount(rng.integers(0, DIHEDRAL_COUNT, size=draws), minlength=8)
        assert np.all(np.abs(counts / draws - 0.125) < 0.02 * 1.0)

    def test_lockstep_same_transform(self):
        # markers at distinct corners confirm both patches moved identically
        deg = np.zeros((8, 8, 3), np.float32)
        gt = np.zeros((8, 8, 3), np.float32)
        deg[0, 0, 0] = 1.0
        gt[0, 0, 1] = 1.0
        rng = np.random.default_rng(10)
        for _ in range(32):
            out = augment(PatchPair(deg, gt), rng)
            pos_deg = np.argwhere(out.degraded[:, :, 0] == 1.0)
            pos_gt = np.argwhere(out.gt[:, :, 1] == 1.0)
            assert np.array_equal(pos_deg, pos_gt)


class TestStream:
    def test_epoch_stream_reproducible(self, synth_records):
        a = PatchStream(synth_records, patch=48, seed=3)
        b = PatchStream(synth_records, patch=48, seed=3)
        for _ in range(10):
            pa, pb = a.next_pair(), b.next_pair()
            assert np.array_equal(pa.degraded, pb.degraded)
            assert np.array_equal(pa.gt, pb.gt)

    def test_empty_dataset_rejected(self):
        with pytest.raises(InputError):
            PatchStream([], patch=32)


class TestSynthGenerator:
    def test_deterministic(self):
        rng_a = np.random.default_rng([1, 2])
        rng_b = np.random.default_rng([1, 2])
        ga, da, ma = generate_pair(rng_a, 48, 48)
        gb, db, mb = generate_pair(rng_b, 48, 48)
        assert np.array_equal(ga, gb) and np.array_equal(da, db)
        assert np.array_equal(ma, mb)

    def test_degradation_is_meaningful(self, synth_root, synth_records):
        from lightnorm.quality import psnr
        values = [
            psnr(load_image(r.gt_path), load_image(r.degraded_path))
            for r in synth_records
        ]
        assert 5 < float(np.mean(values)) < 25

    def test_written_layout(self, tmp_path):
        names = synth_dataset(tmp_path / "s", 2, size=(32, 40), seed=1)
        assert names == ["pair_0000.png", "pair_0001.png"]
        records = index_dataset(tmp_path / "s")
        assert len(records) == 2
        img = load_image(records[0].degraded_path)
        assert img.shape == (32, 40, 3)
        assert load_mask(records[0].mask_path).shape == (32, 40)
