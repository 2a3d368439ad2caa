import csv
import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image

from contrast_translate.data import (DatasetSpec, MeanColorOracle, SyntheticStyleSpec,
                                     batch_indices, foreground_mask, load_dataset,
                                     make_synthetic, mask_iou, save_dataset, style_palette)


def write_png(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array.astype(np.uint8)).save(path)


class TestLoadDataset:
    def test_celeba_style_crop_and_resize(self, tmp_path):
        rng = np.random.default_rng(0)
        # 178 wide, 218 tall, like aligned CelebA
        write_png(tmp_path / "a.png", rng.integers(0, 256, (218, 178, 3)))
        ds = load_dataset(DatasetSpec(root=str(tmp_path), resolution=128, center_crop=178))
        assert ds.images.shape == (1, 3, 128, 128)
        assert ds.images.min() >= -1 and ds.images.max() <= 1

    def test_crop_takes_the_centre(self, tmp_path):
        arr = np.zeros((218, 178, 3), dtype=np.uint8)
        arr[20:198] = 255  # exactly the central 178 rows are white
        write_png(tmp_path / "a.png", arr)
        ds = load_dataset(DatasetSpec(root=str(tmp_path), resolution=128, center_crop=178))
        assert torch.allclose(ds.images, torch.ones_like(ds.images))

    def test_matching_size_is_only_rescaled(self, tmp_path):
        rng = np.random.default_rng(1)
        arr = rng.integers(0, 256, (64, 64, 3))
        write_png(tmp_path / "a.png", arr)
        ds = load_dataset(DatasetSpec(root=str(tmp_path), resolution=64))
        expected = torch.from_numpy(arr).permute(2, 0, 1).float() / 127.5 - 1
        assert torch.equal(ds.images[0], expected)

    def test_sorted_order_and_determinism(self, tmp_path):
        rng = np.random.default_rng(2)
        for name in ("c.png", "a.png", "b.jpg"):
            write_png(tmp_path / name, rng.integers(0, 256, (32, 32, 3)))
        spec = DatasetSpec(root=str(tmp_path), resolution=32)
        a, b = load_dataset(spec), load_dataset(spec)
        assert a.paths == ["a.png", "b.jpg", "c.png"]
        assert torch.equal(a.images, b.images)

    def test_class_subdirectories_become_labels(self, tmp_path):
        rng = np.random.default_rng(3)
        for cls in ("dog", "cat"):
            for i in range(2):
                write_png(tmp_path / "train" / cls / f"{i}.png", rng.integers(0, 256, (32, 32, 3)))
        ds = load_dataset(DatasetSpec(root=str(tmp_path), resolution=32))
        assert ds.class_names == ["cat", "dog"]
        assert ds.labels.tolist() == [0, 0, 1, 1]

    def test_label_file(self, tmp_path):
        rng = np.random.default_rng(4)
        for name in ("x.png", "y.png"):
            write_png(tmp_path / name, rng.integers(0, 256, (32, 32, 3)))
        labels = tmp_path / "attrs.csv"
        with open(labels, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["path", "Black_Hair", "Smiling"])
            w.writerow(["x.png", "1", "-1"])
            w.writerow(["y.png", "-1", "1"])
        ds = load_dataset(DatasetSpec(root=str(tmp_path), resolution=32, label_file=str(labels)))
        assert ds.attribute_names == ["Black_Hair", "Smiling"]
        assert ds.labels.tolist() == [[1, 0], [0, 1]]
        assert ds.multilabel

    def test_unreadable_file_is_skipped(self, tmp_path, caplog):
        write_png(tmp_path / "good.png", np.zeros((32, 32, 3)))
        (tmp_path / "bad.png").write_bytes(b"not an image")
        with caplog.at_level(logging.WARNING):
            ds = load_dataset(DatasetSpec(root=str(tmp_path), resolution=32))
        assert len(ds) == 1 and ds.skipped == 1
        assert "bad.png" in caplog.text

    def test_empty_dataset(self, tmp_path):
        with pytest.raises(ValueError, match="no decodable images"):
            load_dataset(DatasetSpec(root=str(tmp_path), resolution=32))

    def test_missing_root(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(DatasetSpec(root=str(tmp_path / "nope"), resolution=32))

    @pytest.mark.parametrize("kwargs", [dict(resolution=100), dict(resolution=128, center_crop=64)])
    def test_spec_validation(self, kwargs):
        with pytest.raises(ValueError):
            DatasetSpec(**kwargs).validate()


class TestSynthetic:
    def test_size_and_balance(self):
        ds = make_synthetic(SyntheticStyleSpec(num_images=200, resolution=32, num_styles=2))
        assert ds.images.shape == (200, 3, 32, 32)
        assert torch.bincount(ds.labels).tolist() == [100, 100]
        assert ds.images.min() >= -1 and ds.images.max() <= 1

    def test_same_seed_same_dataset(self):
        spec = SyntheticStyleSpec(num_images=30, resolution=32, seed=5)
        a, b = make_synthetic(spec), make_synthetic(spec)
        assert torch.equal(a.images, b.images) and torch.equal(a.labels, b.labels)
        c = make_synthetic(SyntheticStyleSpec(num_images=30, resolution=32, seed=6))
        assert not torch.equal(a.images, c.images)

    @pytest.mark.parametrize("num_styles", [2, 3, 5])
    @pytest.mark.parametrize("style", ["solid", "striped"])
    def test_mean_color_oracle_is_perfect(self, num_styles, style):
        ds = make_synthetic(SyntheticStyleSpec(num_images=200, resolution=64, num_styles=num_styles,
                                               style_generator=style))
        pred = MeanColorOracle(num_styles)(ds.images).argmax(dim=1)
        assert torch.equal(pred, ds.labels)

    def test_masks_recovered_from_pixels(self):
        ds = make_synthetic(SyntheticStyleSpec(num_images=50, resolution=64))
        iou = mask_iou(foreground_mask(ds.images), ds.masks)
        assert iou.min().item() == 1.0

    def test_structure_independent_of_style(self):
        ds = make_synthetic(SyntheticStyleSpec(num_images=400, resolution=64))
        area = ds.masks.flatten(1).float().mean(1)
        a0, a1 = area[ds.labels == 0], area[ds.labels == 1]
        # shape size does not reveal the style class
        assert abs(a0.mean() - a1.mean()) < 0.25 * area.std()

    def test_palette_distinct(self):
        pal = style_palette(4)
        assert pal.shape == (4, 3)
        assert torch.cdist(pal, pal).fill_diagonal_(1).min() > 0.1

    def test_validation(self):
        with pytest.raises(ValueError, match="num_styles"):
            make_synthetic(SyntheticStyleSpec(num_styles=1))

    def test_save_then_load_roundtrip(self, tmp_path):
        ds = make_synthetic(SyntheticStyleSpec(num_images=6, resolution=32))
        save_dataset(ds, tmp_path)
        back = load_dataset(DatasetSpec(root=str(tmp_path), resolution=32))
        assert len(back) == 6
        assert back.class_names == ds.class_names
        # PNG quantisation is below one grey level
        assert sorted(back.labels.tolist()) == sorted(ds.labels.tolist())
        labelled = load_dataset(DatasetSpec(root=str(tmp_path), resolution=32,
                                            label_file=str(tmp_path / "labels.csv")))
        assert torch.equal(labelled.labels, back.labels)


class TestBatchOrder:
    @given(st.integers(2, 60), st.integers(1, 16), st.integers(0, 1000))
    @settings(max_examples=60, deadline=None)
    def test_each_epoch_is_a_permutation(self, n, batch_size, seed):
        if batch_size > n:
            batch_size = n
        steps = (3 * n) // batch_size
        stream = torch.cat([batch_indices(n, batch_size, s, seed) for s in range(steps)])
        for epoch in range(len(stream) // n):
            assert sorted(stream[epoch * n:(epoch + 1) * n].tolist()) == list(range(n))

    def test_stateless(self):
        assert torch.equal(batch_indices(50, 8, 17, 3), batch_indices(50, 8, 17, 3))
        assert not torch.equal(batch_indices(50, 8, 17, 3), batch_indices(50, 8, 17, 4))

    def test_too_small(self):
        with pytest.raises(ValueError, match="smaller than batch size"):
            batch_indices(3, 4, 0, 0)
