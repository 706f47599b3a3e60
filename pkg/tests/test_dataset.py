import numpy as np
import pytest

from fungnet.dataset import (
    DatasetManifest,
    ManifestData,
    Record,
    SplitSpec,
    _allocate,
    epoch_batches,
    ingest,
    split,
)


def synthetic_manifest(n_pos=240, n_neg=210):
    recs = [Record(f"p{i}.png", 1) for i in range(n_pos)] + [Record(f"e{i}.png", 0) for i in range(n_neg)]
    return DatasetManifest(recs)


def fake_loader(path):
    v = sum(map(ord, path)) % 256
    return np.full((8, 8, 3), v, dtype=np.uint8)


class TestSplit:
    def test_default_counts(self):
        m = split(synthetic_manifest(), SplitSpec(seed=3))
        assert [len(m.subset(s)) for s in ("train", "val", "test")] == [320, 40, 90]

    @pytest.mark.parametrize("seed", range(5))
    def test_stratified_within_one(self, seed):
        m = split(synthetic_manifest(), SplitSpec(seed=seed))
        for s in ("train", "val", "test"):
            sub = m.subset(s)
            pos = sum(r.label for r in sub)
            assert abs(pos - len(sub) * 240 / 450) <= 1

    def test_partition(self):
        m = split(synthetic_manifest(), SplitSpec(seed=1))
        assert sorted(r.path for r in m.records) == sorted(r.path for r in synthetic_manifest().records)
        assert all(r.split in ("train", "val", "test") for r in m.records)

    def test_seed_reproducible(self):
        a = split(synthetic_manifest(), SplitSpec(seed=9)).to_csv()
        b = split(synthetic_manifest(), SplitSpec(seed=9)).to_csv()
        c = split(synthetic_manifest(), SplitSpec(seed=10)).to_csv()
        assert a == b and a != c

    def test_uniform(self):
        m = split(synthetic_manifest(), SplitSpec(90, 40, stratified=False, seed=0))
        assert len(m.subset("test")) == 90 and len(m.subset("val")) == 40

    def test_infeasible(self):
        with pytest.raises(ValueError, match="infeasible"):
            split(synthetic_manifest(5, 5), SplitSpec(6, 4))

    def test_allocate(self):
        assert _allocate(90, [210, 240]) == [42, 48]
        assert _allocate(3, [1, 1]) in ([2, 1], [1, 2])
        assert sum(_allocate(7, [3, 5, 9])) == 7


class TestBatches:
    @pytest.fixture
    def manifest(self):
        return split(synthetic_manifest(), SplitSpec(seed=0))

    def test_counts(self, manifest):
        train = epoch_batches(manifest, "train", 4, 0, 0, resize=8, size=8, loader=fake_loader)
        test = epoch_batches(manifest, "test", 4, 0, 0, resize=8, size=8, loader=fake_loader)
        assert len(train) == 80 and all(len(y) == 4 for _, y in train)
        assert len(test) == 23 and len(test[-1][1]) == 2
        assert test[0][0].shape == (4, 3, 8, 8)

    def test_train_reshuffled_eval_fixed(self, manifest):
        def labels(split_name, epoch):
            return np.concatenate([y for _, y in epoch_batches(manifest, split_name, 4, 0, epoch,
                                                               resize=8, size=8, loader=fake_loader)])
        assert not np.array_equal(labels("train", 0), labels("train", 1))
        np.testing.assert_array_equal(labels("train", 1), labels("train", 1))
        np.testing.assert_array_equal(labels("test", 0), labels("test", 5))

    def test_empty_split(self):
        with pytest.raises(ValueError, match="empty"):
            epoch_batches(synthetic_manifest(), "train", 4, 0, 0)

    def test_bad_batch_size(self, manifest):
        with pytest.raises(ValueError, match="batch_size"):
            epoch_batches(manifest, "train", 0, 0, 0)


class TestIngest:
    def test_counts_and_skips(self, corpus_factory):
        root = corpus_factory(3, 2, junk=("edible/broken.jpg", "poisonous/notes.txt"))
        m = ingest(root)
        assert m.fingerprint() == {"edible": 2, "poisonous": 3}
        assert m.skipped == 2
        assert all(r.split == "unassigned" for r in m.records)

    def test_missing_folder(self, tmp_path):
        (tmp_path / "edible").mkdir()
        with pytest.raises(FileNotFoundError, match="poisonous"):
            ingest(tmp_path)

    def test_empty(self, tmp_path):
        (tmp_path / "edible").mkdir()
        (tmp_path / "poisonous").mkdir()
        with pytest.raises(ValueError, match="no decodable"):
            ingest(tmp_path)

    def test_real_images_batch(self, corpus_factory):
        m = split(ingest(corpus_factory(6, 4)), SplitSpec(2, 2, seed=0))
        (x, y), *_ = list(ManifestData(m, 4, 0).batches("train", 0))
        assert x.shape == (4, 3, 224, 224) and x.dtype == np.float32


class TestManifestCsv:
    def test_round_trip(self):
        m = split(synthetic_manifest(4, 4), SplitSpec(2, 2))
        assert DatasetManifest.from_csv(m.to_csv()).records == m.records

    def test_bad_label(self):
        with pytest.raises(ValueError, match="edible or poisonous"):
            DatasetManifest.from_csv("path,label,split\na.png,toxic,train\n")

    def test_duplicate_paths(self):
        with pytest.raises(ValueError, match="unique"):
            DatasetManifest([Record("a", 0), Record("a", 1)])
