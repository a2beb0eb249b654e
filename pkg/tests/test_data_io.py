import gzip
import struct

import numpy as np
import pytest

from treediffuse.data_io import (
    CheckpointContainer,
    DatasetSpec,
    PrefetchIterator,
    append_jsonl,
    checkpoint_digest_on_disk,
    deserialize_arrays,
    iter_batches,
    load_checkpoint,
    load_dataset,
    make_synthetic,
    read_cifar_batch,
    read_grid_tile,
    read_idx,
    read_jsonl,
    require_structural_match,
    save_checkpoint,
    serialize_arrays,
    write_image_grid,
)
from treediffuse.errors import ConfigError, DomainError, IngestionError, IntegrityError


def write_idx(path, array, gz=False):
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">BBBB", 0, 0, 0x08, array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    data = header + array.tobytes()
    if gz:
        with gzip.open(path, "wb") as fh:
            fh.write(data)
    else:
        path.write_bytes(data)


def write_mnist_dir(tmp_path, n_train=12, n_test=6, gz=False):
    rng = np.random.default_rng(0)
    for split, n in (("train", n_train), ("t10k", n_test)):
        imgs = rng.integers(0, 256, size=(n, 28, 28))
        labels = rng.integers(0, 10, size=(n,))
        suffix = ".gz" if gz else ""
        write_idx(tmp_path / f"{split}-images-idx3-ubyte{suffix}", imgs, gz)
        write_idx(tmp_path / f"{split}-labels-idx1-ubyte{suffix}", labels, gz)
    return tmp_path


class TestIdx:
    def test_round_trip(self, tmp_path):
        arr = np.arange(2 * 5 * 4, dtype=np.uint8).reshape(2, 5, 4)
        write_idx(tmp_path / "f.idx", arr)
        assert np.array_equal(read_idx(tmp_path / "f.idx"), arr)

    def test_gzip_detected(self, tmp_path):
        arr = np.arange(30, dtype=np.uint8).reshape(5, 6)
        write_idx(tmp_path / "f.idx.gz", arr, gz=True)
        assert np.array_equal(read_idx(tmp_path / "f.idx.gz"), arr)

    def test_truncated_payload(self, tmp_path):
        arr = np.zeros((3, 4), dtype=np.uint8)
        write_idx(tmp_path / "f.idx", arr)
        data = (tmp_path / "f.idx").read_bytes()
        (tmp_path / "f.idx").write_bytes(data[:-2])
        with pytest.raises(IngestionError):
            read_idx(tmp_path / "f.idx")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "f.idx").write_bytes(b"\x01\x02\x03\x04rest")
        with pytest.raises(IngestionError):
            read_idx(tmp_path / "f.idx")

    def test_mnist_like_loading(self, tmp_path):
        write_mnist_dir(tmp_path)
        spec = DatasetSpec("mnist", (1, 28, 28), 10, n_train=0, n_test=0, data_dir=str(tmp_path))
        splits = load_dataset(spec, seed=1)
        assert splits.train.images.shape == (12, 1, 28, 28)
        assert splits.test.images.shape == (6, 1, 28, 28)
        assert splits.train.images.dtype == np.float32
        assert 0.0 <= splits.train.images.min() and splits.train.images.max() <= 1.0


class TestCifar:
    def _write_batch(self, path, n, seed=0):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 10, size=(n, 1), dtype=np.uint8)
        pixels = rng.integers(0, 256, size=(n, 3072), dtype=np.uint8)
        path.write_bytes(np.concatenate([labels, pixels], axis=1).tobytes())
        return labels[:, 0], pixels

    def test_batch_shape(self, tmp_path):
        labels, pixels = self._write_batch(tmp_path / "b.bin", 17)
        images, got_labels = read_cifar_batch(tmp_path / "b.bin")
        assert images.shape == (17, 3, 32, 32)
        assert np.array_equal(got_labels, labels)
        assert images[0, 0, 0, 0] == pytest.approx(pixels[0, 0] / 255.0)

    def test_full_test_split_is_10000(self, tmp_path):
        # the published test batch holds exactly 10,000 records
        for i in range(1, 6):
            self._write_batch(tmp_path / f"data_batch_{i}.bin", 20, seed=i)
        self._write_batch(tmp_path / "test_batch.bin", 10_000, seed=9)
        spec = DatasetSpec("cifar10", (3, 32, 32), 10, n_train=0, n_test=0, data_dir=str(tmp_path))
        splits = load_dataset(spec, seed=0)
        assert splits.test.images.shape == (10_000, 3, 32, 32)
        assert splits.train.images.shape == (100, 3, 32, 32)

    def test_corrupt_batch(self, tmp_path):
        (tmp_path / "b.bin").write_bytes(b"\x00" * 100)
        with pytest.raises(IngestionError):
            read_cifar_batch(tmp_path / "b.bin")


class TestSynthetic:
    def test_deterministic(self):
        a = make_synthetic(50, 4, 28, seed=7)
        b = make_synthetic(50, 4, 28, seed=7)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_range_and_shape(self):
        d = make_synthetic(20, 2, 28, seed=0)
        assert d.images.shape == (20, 1, 28, 28)
        assert d.images.min() >= 0.0 and d.images.max() <= 1.0

    def test_classes_distinguishable(self):
        d = make_synthetic(200, 2, 28, seed=3, noise_std=0.0)
        means = [d.images[d.labels == k].mean(axis=0)[0] for k in range(2)]
        assert np.abs(means[0] - means[1]).max() > 0.5

    def test_class_count_validated(self):
        with pytest.raises(ConfigError):
            make_synthetic(10, 9, 28, seed=0)

    def test_load_dataset_idempotent(self):
        spec = DatasetSpec("synthetic", (1, 28, 28), 3, n_train=40, n_test=10)
        a = load_dataset(spec, seed=7)
        b = load_dataset(spec, seed=7)
        assert np.array_equal(a.train.images, b.train.images)
        assert np.array_equal(a.test.labels, b.test.labels)
        assert len(a.train) == 40 and len(a.test) == 10


class TestBatches:
    def test_order_without_rng(self):
        images = np.arange(10, dtype=np.float32)[:, None]
        batches = list(iter_batches(images, None, 4))
        assert [len(b[0]) for b in batches] == [4, 4, 2]
        assert np.array_equal(np.concatenate([b[0] for b in batches]), images)

    def test_shuffle_deterministic(self):
        images = np.arange(10, dtype=np.float32)[:, None]
        a = [b[0] for b in iter_batches(images, None, 3, np.random.default_rng(1))]
        b = [b[0] for b in iter_batches(images, None, 3, np.random.default_rng(1))]
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_prefetch_matches_plain(self):
        images = np.arange(20, dtype=np.float32)[:, None]
        labels = np.arange(20)
        plain = list(iter_batches(images, labels, 6))
        fetched = list(PrefetchIterator(iter_batches(images, labels, 6)))
        assert len(plain) == len(fetched)
        for (pi, pl), (fi, fl) in zip(plain, fetched):
            assert np.array_equal(pi, fi) and np.array_equal(pl, fl)

    def test_prefetch_propagates_errors(self):
        def boom():
            yield 1
            raise RuntimeError("worker failed")

        it = PrefetchIterator(boom())
        assert next(it) == 1
        with pytest.raises(RuntimeError):
            next(it)


class TestCheckpoint:
    def _container(self):
        rng = np.random.default_rng(0)
        return CheckpointContainer(
            components={
                "encoder": {"w": rng.normal(size=(3, 3)).astype(np.float32), "b": np.zeros(3)},
                "decoder:4": {"w": rng.normal(size=(2, 5)).astype(np.float64)},
            },
            manifest={"seed": 11, "config": {"tree": {"max_leaves": 4}}, "conditional_mode": "cluster_conditional"},
        )

    def test_blob_round_trip(self):
        arrays = {"a": np.arange(6, dtype=np.int64).reshape(2, 3), "b": np.full(4, 1.5, dtype=np.float32)}
        back = deserialize_arrays(serialize_arrays(arrays))
        assert set(back) == {"a", "b"}
        assert np.array_equal(back["a"], arrays["a"])
        assert back["b"].dtype == np.float32

    def test_save_load_save_byte_identical(self, tmp_path):
        cont = self._container()
        save_checkpoint(cont, tmp_path / "c1")
        loaded = load_checkpoint(tmp_path / "c1")
        save_checkpoint(loaded, tmp_path / "c2")
        d1 = checkpoint_digest_on_disk(tmp_path / "c1")
        d2 = checkpoint_digest_on_disk(tmp_path / "c2")
        assert d1 == d2

    def test_manifest_survives(self, tmp_path):
        cont = self._container()
        save_checkpoint(cont, tmp_path / "c")
        loaded = load_checkpoint(tmp_path / "c")
        assert loaded.manifest["seed"] == 11
        assert loaded.manifest["conditional_mode"] == "cluster_conditional"
        assert loaded.digest == cont.digest

    def test_single_bit_corruption_detected(self, tmp_path):
        cont = self._container()
        save_checkpoint(cont, tmp_path / "c")
        blob_path = tmp_path / "c" / "blobs" / "encoder.bin"
        data = bytearray(blob_path.read_bytes())
        data[-1] ^= 0x01
        blob_path.write_bytes(bytes(data))
        with pytest.raises(IntegrityError, match="encoder"):
            load_checkpoint(tmp_path / "c")

    def test_structural_mismatch_refused(self):
        manifest = {"config": {"tree": {"max_leaves": 4}, "ddpm": {"conditional_mode": "cluster_unconditional"}}}
        require_structural_match(manifest, {"tree": {"max_leaves": 4}}, ["tree.max_leaves"])
        with pytest.raises(ConfigError):
            require_structural_match(manifest, {"tree": {"max_leaves": 8}}, ["tree.max_leaves"])
        with pytest.raises(ConfigError):
            require_structural_match(
                manifest,
                {"ddpm": {"conditional_mode": "cluster_conditional"}},
                ["ddpm.conditional_mode"],
            )


class TestJsonl:
    def test_append_and_read(self, tmp_path):
        path = tmp_path / "log.jsonl"
        append_jsonl(path, {"epoch": 0, "elbo": -1.5})
        append_jsonl(path, {"epoch": 1, "split": 3})
        records = read_jsonl(path)
        assert records == [{"epoch": 0, "elbo": -1.5}, {"epoch": 1, "split": 3}]


class TestImageGrid:
    def test_tile_count_and_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        images = [rng.random((1, 12, 10)).astype(np.float32) for _ in range(12)]
        geom = write_image_grid(images, (3, 4), None, tmp_path / "g.png")
        assert geom["rows"] == 3 and geom["cols"] == 4
        for i, img in enumerate(images):
            r, c = divmod(i, 4)
            tile = read_grid_tile(tmp_path / "g.png", geom, r, c)
            assert np.abs(tile - img).max() <= 1.0 / 255.0 + 1e-6

    def test_rgb_with_annotations(self, tmp_path):
        rng = np.random.default_rng(1)
        images = [rng.random((3, 8, 8)).astype(np.float32) for _ in range(4)]
        geom = write_image_grid(images, (1, 4), ["p=0.25"] * 4, tmp_path / "g.png")
        assert geom["header"] > 0
        tile = read_grid_tile(tmp_path / "g.png", geom, 0, 2)
        assert np.abs(tile - images[2]).max() <= 1.0 / 255.0 + 1e-6

    def test_layout_mismatch(self, tmp_path):
        images = [np.zeros((1, 4, 4))] * 3
        with pytest.raises(DomainError):
            write_image_grid(images, (2, 2), None, tmp_path / "g.png")

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(DomainError):
            write_image_grid([], (0, 0), None, tmp_path / "g.png")
