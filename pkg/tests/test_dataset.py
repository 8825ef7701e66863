import math

import numpy as np
import pytest

from robustface import dataset as dataset_module
from robustface.dataset import (
    FaceDataset,
    check_triplet_ready,
    filter_min_images,
    generate_synthetic,
    load_dataset,
    make_label_mask,
    sample_triplet,
    sample_triplets,
    split_train_val,
    write_dataset,
)
from robustface.errors import (
    DataError,
    EmptyDatasetError,
    ImageShapeError,
    ManifestError,
    MissingImageError,
    SamplingError,
)
from robustface.imageio import quantize, write_pgm


def write_manifest(root, rows, header="path,identity"):
    path = root / "manifest.csv"
    path.write_text("\n".join([header] + rows) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def image_dir(tmp_path):
    for name in ("a", "b", "c"):
        write_pgm(tmp_path / f"{name}.pgm", np.full((4, 4), ord(name), dtype=np.uint8))
    write_pgm(tmp_path / "wide.pgm", np.zeros((4, 5), dtype=np.uint8))
    return tmp_path


class TestManifest:
    def test_labels_are_densified(self, image_dir):
        ds = load_dataset(write_manifest(image_dir, ["a.pgm,9", "b.pgm,5", "c.pgm,9"]))
        np.testing.assert_array_equal(ds.labels, [1, 0, 1])
        assert ds.image_shape == (4, 4, 1)
        assert ds.paths == ["a.pgm", "b.pgm", "c.pgm"]
        assert ds.images[0, 0, 0, 0] == pytest.approx(ord("a") / 255)

    def test_bad_header(self, image_dir):
        with pytest.raises(ManifestError) as err:
            load_dataset(write_manifest(image_dir, ["a.pgm,1"], header="file,label"))
        assert err.value.row == 0

    def test_missing_image_names_the_row(self, image_dir):
        with pytest.raises(MissingImageError) as err:
            load_dataset(write_manifest(image_dir, ["a.pgm,1", "nope.pgm,2"]))
        assert err.value.row == 2

    def test_inconsistent_shape(self, image_dir):
        with pytest.raises(ImageShapeError) as err:
            load_dataset(write_manifest(image_dir, ["a.pgm,1", "wide.pgm,2"]))
        assert err.value.row == 2

    @pytest.mark.parametrize("row", ["a.pgm,x", "a.pgm,-1", "a.pgm"])
    def test_malformed_row(self, image_dir, row):
        with pytest.raises(ManifestError):
            load_dataset(write_manifest(image_dir, [row]))

    def test_unreadable_image(self, image_dir):
        (image_dir / "junk.pgm").write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(ManifestError):
            load_dataset(write_manifest(image_dir, ["junk.pgm,0"]))

    def test_empty_manifest(self, image_dir):
        with pytest.raises(EmptyDatasetError):
            load_dataset(write_manifest(image_dir, []))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "manifest.csv")

    def test_written_dataset_loads_back(self, tmp_path, tiny_ds):
        manifest = write_dataset(tiny_ds, tmp_path)
        assert manifest.read_bytes().startswith(b"path,identity\nimages/id0000_000.pgm,0\n")
        loaded = load_dataset(manifest)
        np.testing.assert_array_equal(loaded.labels, tiny_ds.labels)
        expected = np.stack([quantize(img) for img in tiny_ds.images])
        np.testing.assert_array_equal(np.stack([quantize(img) for img in loaded.images]), expected)


class TestFilterAndSplit:
    def test_filter_min_images(self):
        ds = FaceDataset(np.zeros((6, 2, 2, 1)), [3, 3, 3, 7, 8, 8])
        kept = filter_min_images(ds, 2)
        np.testing.assert_array_equal(kept.labels, [0, 0, 0, 1, 1])
        assert filter_min_images(ds, 1).num_identities == 3
        with pytest.raises(EmptyDatasetError):
            filter_min_images(ds, 4)
        with pytest.raises(DataError):
            filter_min_images(ds, 0)

    def test_filter_is_idempotent(self):
        ds = FaceDataset(np.arange(7 * 4, dtype=np.float32).reshape(7, 2, 2, 1) / 28, [3, 3, 3, 7, 8, 8, 9])
        once = filter_min_images(ds, 2)
        twice = filter_min_images(once, 2)
        assert twice.images.tobytes() == once.images.tobytes()
        np.testing.assert_array_equal(twice.labels, once.labels)
        assert twice.paths == once.paths

    def test_split_is_disjoint_and_stratified(self, rng):
        ds = generate_synthetic(num_identities=5, images_per_identity=10, height=4, width=4, seed=1)
        train, val = split_train_val(ds, 0.2, rng)
        assert len(train) + len(val) == len(ds)
        assert not set(train.paths) & set(val.paths)
        for ident in range(5):
            assert np.count_nonzero(val.labels == ident) == 2
            assert np.count_nonzero(train.labels == ident) == 8

    def test_small_fraction_still_leaves_positives(self, rng):
        ds = generate_synthetic(num_identities=3, images_per_identity=5, height=4, width=4, seed=1)
        train, val = split_train_val(ds, 0.2, rng)
        check_triplet_ready(train)
        check_triplet_ready(val)

    def test_zero_fraction(self, rng, tiny_ds):
        train, val = split_train_val(tiny_ds, 0.0, rng)
        assert len(train) == len(tiny_ds) and len(val) == 0

    def test_fraction_range(self, rng, tiny_ds):
        with pytest.raises(DataError):
            split_train_val(tiny_ds, 1.0, rng)


class TestTriplets:
    def test_triplet_validity(self, tiny_ds, rng):
        for _ in range(200):
            t = sample_triplet(tiny_ds, rng)
            assert t.anchor_idx != t.positive_idx
            assert tiny_ds.labels[t.anchor_idx] == tiny_ds.labels[t.positive_idx]
            assert tiny_ds.labels[t.anchor_idx] != tiny_ds.labels[t.negative_idx]

    def test_sampling_is_deterministic(self, tiny_ds):
        first = sample_triplets(tiny_ds, 50, np.random.default_rng(8))
        second = sample_triplets(tiny_ds, 50, np.random.default_rng(8))
        assert first.dtype == np.int64 and first.shape == (50, 3)
        np.testing.assert_array_equal(first, second)

    def test_single_identity_cannot_sample(self, rng):
        with pytest.raises(SamplingError):
            sample_triplet(FaceDataset(np.zeros((3, 2, 2, 1)), [0, 0, 0]), rng)

    def test_singleton_identity_cannot_sample(self, rng):
        with pytest.raises(SamplingError, match="filter_min_images"):
            sample_triplets(FaceDataset(np.zeros((3, 2, 2, 1)), [0, 0, 1]), 1, rng)

    def test_two_by_two_dataset(self):
        ds = FaceDataset(np.zeros((4, 2, 2, 1)), [0, 1, 0, 1])
        triplets = sample_triplets(ds, 1000, np.random.default_rng(2))
        anchors, positives, negatives = triplets.T
        assert np.all(anchors != positives)
        assert np.all(ds.labels[anchors] == ds.labels[positives])
        assert np.all(ds.labels[anchors] != ds.labels[negatives])
        # with two images per identity the positive is forced
        np.testing.assert_array_equal(positives, (anchors + 2) % 4)

    def test_anchor_distribution_is_uniform(self, tiny_ds):
        anchors = sample_triplets(tiny_ds, 10_000, np.random.default_rng(21))[:, 0]
        counts = np.bincount(anchors, minlength=len(tiny_ds))
        expected = 10_000 / len(tiny_ds)
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        dof = len(tiny_ds) - 1
        assert chi2 <= dof + 3 * math.sqrt(2 * dof)

    def test_readiness_checked_once_per_pool(self, tiny_ds, monkeypatch):
        calls = []
        original = dataset_module.check_triplet_ready
        monkeypatch.setattr(dataset_module, "check_triplet_ready", lambda ds: calls.append(1) or original(ds))
        sample_triplets(tiny_ds, 100, np.random.default_rng(0))
        assert len(calls) == 1

    def test_complements_are_cached(self, tiny_ds):
        assert tiny_ds.complement_index is tiny_ds.complement_index
        for label, others in tiny_ds.complement_index.items():
            assert np.all(tiny_ds.labels[others] != label)
            assert others.size + tiny_ds.identity_index[label].size == len(tiny_ds)


class TestLabelMask:
    @pytest.mark.parametrize("fraction", [0.0, 0.1, 0.25, 0.5, 1.0])
    def test_exact_visible_count(self, fraction, rng):
        ds = generate_synthetic(num_identities=7, images_per_identity=6, height=4, width=4, seed=2)
        mask = make_label_mask(ds, fraction, rng)
        assert mask.visible_count == math.floor(fraction * len(ds))

    def test_per_identity_quota(self, rng):
        ds = generate_synthetic(num_identities=4, images_per_identity=10, height=4, width=4, seed=2)
        mask = make_label_mask(ds, 0.3, rng)
        for members in ds.identity_index.values():
            assert mask.flags[members].sum() >= 3

    def test_fraction_range(self, rng, tiny_ds):
        with pytest.raises(DataError):
            make_label_mask(tiny_ds, 1.5, rng)


class TestSynthetic:
    def test_shapes_and_range(self):
        ds = generate_synthetic(num_identities=3, images_per_identity=4, height=8, width=6, seed=0)
        assert ds.images.shape == (12, 8, 6, 1)
        assert ds.images.min() >= 0 and ds.images.max() <= 1
        assert ds.num_identities == 3 and ds.input_dim == 48

    def test_deterministic(self):
        a = generate_synthetic(num_identities=3, images_per_identity=2, height=5, width=5, seed=4)
        b = generate_synthetic(num_identities=3, images_per_identity=2, height=5, width=5, seed=4)
        assert a.images.tobytes() == b.images.tobytes()

    def test_identities_are_separable(self):
        ds = generate_synthetic(num_identities=4, images_per_identity=6, height=8, width=8, noise_sigma=0.02, max_shift=0)
        flat = ds.flat()
        centroids = np.stack([flat[ds.labels == k].mean(axis=0) for k in range(4)])
        nearest = np.argmin(((flat[:, None, :] - centroids[None]) ** 2).sum(axis=2), axis=1)
        np.testing.assert_array_equal(nearest, ds.labels)

    def test_noise_free_unshifted_identities_are_constant(self):
        ds = generate_synthetic(num_identities=3, images_per_identity=4, height=6, width=6, noise_sigma=0.0, max_shift=0)
        for members in ds.identity_index.values():
            for i in members[1:]:
                assert ds.images[i].tobytes() == ds.images[members[0]].tobytes()
        assert ds.images[0].tobytes() != ds.images[4].tobytes()

    def test_default_dataset_is_separable(self):
        ds = generate_synthetic(seed=0)
        assert ds.images.shape == (200, 16, 16, 1)
        flat = ds.flat().astype(np.float64)
        centroids = np.stack([flat[ds.labels == k].mean(axis=0) for k in range(ds.num_identities)])
        nearest = np.argmin(((flat[:, None, :] - centroids[None]) ** 2).sum(axis=2), axis=1)
        assert np.mean(nearest == ds.labels) >= 0.95

    def test_images_are_read_only(self, tiny_ds):
        with pytest.raises(ValueError):
            tiny_ds.images[0, 0, 0, 0] = 1.0

    def test_parameter_validation(self):
        with pytest.raises(DataError):
            generate_synthetic(num_identities=0)
