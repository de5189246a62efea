import numpy as np
import pytest
import torch

from boundaryseg.core import save_image, save_mask
from boundaryseg.data import (NORMALIZE_MEAN, NORMALIZE_STD, TRAIN_CROP,
                              TRAIN_RESIZE, DatasetSpec, PairingError,
                              augment_hflip, eval_transform, hflip_sample,
                              load_sample, normalize_image, scan_pairs,
                              train_transform)

from conftest import blob_pair, blob_sample


def write_corpus(root, stems, mask_stems=None):
    image_dir = root / "images"
    mask_dir = root / "masks"
    image_dir.mkdir()
    mask_dir.mkdir()
    for i, stem in enumerate(stems):
        image, mask = blob_pair(40, 40, seed=i)
        save_image(image, image_dir / f"{stem}.png")
        save_mask(mask, mask_dir / f"{(mask_stems or stems)[i]}.png")
    return DatasetSpec(image_dir=image_dir, mask_dir=mask_dir)


class TestScanPairs:
    def test_lexicographic_stem_order(self, tmp_path):
        spec = write_corpus(tmp_path, ["zebra", "ant", "mole"])
        triples = scan_pairs(spec)
        assert [t[0] for t in triples] == ["ant", "mole", "zebra"]
        for stem, img, msk in triples:
            assert img.stem == stem and msk.stem == stem

    def test_unpaired_files_listed(self, tmp_path):
        spec = write_corpus(tmp_path, ["a", "b", "c"], mask_stems=["a", "b", "d"])
        with pytest.raises(PairingError) as exc:
            scan_pairs(spec)
        assert "c" in str(exc.value) and "d" in str(exc.value)

    def test_missing_directory(self, tmp_path):
        spec = DatasetSpec(image_dir=tmp_path / "nope", mask_dir=tmp_path)
        with pytest.raises(FileNotFoundError):
            scan_pairs(spec)

    def test_non_image_files_ignored(self, tmp_path):
        spec = write_corpus(tmp_path, ["a"])
        (spec.image_dir / "notes.txt").write_text("ignored")
        assert len(scan_pairs(spec)) == 1

    def test_split_validation(self, tmp_path):
        with pytest.raises(ValueError):
            DatasetSpec(image_dir=tmp_path, mask_dir=tmp_path, split="val")


class TestFlip:
    def test_involution(self):
        sample = blob_sample(seed=0)
        back = hflip_sample(hflip_sample(sample))
        assert np.array_equal(back.image, sample.image)
        assert np.array_equal(back.mask, sample.mask)

    def test_coordinates_mirrored(self):
        sample = blob_sample(seed=1)
        flipped = hflip_sample(sample)
        w = sample.image.shape[1]
        assert flipped.image[5, 3, 0] == sample.image[5, w - 4, 0]
        assert flipped.identifier.endswith("_flip")

    def test_augment_doubles_originals_first(self):
        samples = [blob_sample(seed=i) for i in range(3)]
        out = augment_hflip(samples)
        assert len(out) == 6
        assert [s.identifier for s in out[:3]] == [s.identifier for s in samples]
        assert all(s.identifier.endswith("_flip") for s in out[3:])


class TestNormalize:
    def test_channel_statistics(self):
        t = torch.zeros(3, 4, 4)
        out = normalize_image(t)
        for ch in range(3):
            expected = -NORMALIZE_MEAN[ch] / NORMALIZE_STD[ch]
            assert out[ch].unique().item() == pytest.approx(expected, abs=1e-6)


class TestTrainTransform:
    def test_output_shapes(self):
        sample = blob_sample(seed=2)
        rng = torch.Generator().manual_seed(0)
        img, msk = train_transform(sample, rng)
        assert tuple(img.shape) == (3, TRAIN_CROP, TRAIN_CROP)
        assert tuple(msk.shape) == (TRAIN_CROP, TRAIN_CROP)
        assert 0.0 <= msk.min().item() and msk.max().item() <= 1.0

    def test_crop_offsets_cover_full_range(self):
        # span is resize - crop + 1 = 33, offsets 0..32 inclusive
        sample = blob_sample(seed=3, height=40, width=40)
        rng = torch.Generator().manual_seed(123)
        offsets = set()
        for _ in range(400):
            r = int(torch.randint(TRAIN_RESIZE - TRAIN_CROP + 1, (1,), generator=rng))
            offsets.add(r)
        assert min(offsets) == 0 and max(offsets) == 32

    def test_image_and_mask_share_crop(self):
        # encode the column index into the image so the crop window is readable
        image = np.tile(np.linspace(0, 1, 320)[None, :, None], (320, 1, 3))
        mask = np.tile(np.linspace(0, 1, 320)[None, :], (320, 1))
        from boundaryseg.core import Sample
        sample = Sample(image=image, mask=mask, identifier="ramp",
                        original_size=(320, 320))
        rng = torch.Generator().manual_seed(7)
        img, msk = train_transform(sample, rng)
        # un-normalize channel 0 and compare with the mask ramp
        ramp = img[0] * NORMALIZE_STD[0] + NORMALIZE_MEAN[0]
        assert torch.allclose(ramp, msk, atol=1e-4)

    def test_seed_determinism(self):
        sample = blob_sample(seed=4)
        a = train_transform(sample, torch.Generator().manual_seed(9))
        b = train_transform(sample, torch.Generator().manual_seed(9))
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_crop_larger_than_resize_rejected(self):
        sample = blob_sample(seed=5)
        with pytest.raises(ValueError):
            train_transform(sample, torch.Generator(), resize=64, crop=65)


class TestEvalTransform:
    def test_resize_and_restore_round_trip(self):
        image, mask = blob_pair(57, 43, seed=6)
        img, restore = eval_transform(image)
        assert tuple(img.shape) == (3, TRAIN_RESIZE, TRAIN_RESIZE)
        prob = torch.from_numpy(mask).to(torch.float32)
        small = torch.nn.functional.interpolate(
            prob[None, None], size=(TRAIN_RESIZE, TRAIN_RESIZE),
            mode="bilinear", align_corners=False)[0, 0]
        restored = restore(small)
        assert restored.shape == (57, 43)
        assert np.abs(restored - mask).mean() < 0.05

    def test_constant_map_restored_exactly(self):
        image, _ = blob_pair(50, 70, seed=7)
        _, restore = eval_transform(image)
        out = restore(torch.full((TRAIN_RESIZE, TRAIN_RESIZE), 0.625))
        assert out.shape == (50, 70)
        assert np.allclose(out, 0.625, atol=1e-6)

    def test_restore_clamps(self):
        image, _ = blob_pair(30, 30, seed=8)
        _, restore = eval_transform(image)
        out = restore(torch.full((TRAIN_RESIZE, TRAIN_RESIZE), 1.5))
        assert out.max() <= 1.0


class TestLoadSample:
    def test_round_trip_from_disk(self, tmp_path):
        spec = write_corpus(tmp_path, ["one"])
        stem, img_path, msk_path = scan_pairs(spec)[0]
        sample = load_sample(stem, img_path, msk_path)
        assert sample.identifier == "one"
        assert sample.image.shape == (40, 40, 3)
        assert sample.mask.shape == (40, 40)
        assert sample.original_size == (40, 40)
