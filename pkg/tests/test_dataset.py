import numpy as np
import pytest

from segforge.augment import AugmentPolicy
from segforge.dataset import SliceDataset, batch_iterator, load_split, read_manifest, write_manifest
from segforge.errors import InputError
from segforge.phantoms import PhantomSpec, generate_phantoms
from segforge.volume import Volume, save_volume


def toy_dataset(n=10, size=16, seed=0):
    rng = np.random.default_rng(seed)
    images = [rng.uniform(size=(size, size)).astype(np.float32) for _ in range(n)]
    labels = [(rng.uniform(size=(size, size)) > 0.5).astype(np.uint8) for _ in range(n)]
    return SliceDataset(images, labels)


def test_batch_sizes():
    ds = toy_dataset(10)
    sizes = [xb.shape[0] for xb, yb, idx in batch_iterator(ds, 4, shuffle_seed=1)]
    assert sizes == [4, 4, 2]


def test_batches_deterministic_and_cover_dataset():
    ds = toy_dataset(13)
    def epoch_indices(epoch):
        out = []
        for _, _, idx in batch_iterator(ds, 5, shuffle_seed=3, epoch=epoch):
            out.extend(int(i) for i in idx)
        return out

    assert epoch_indices(0) == epoch_indices(0)
    assert sorted(epoch_indices(0)) == list(range(13))
    assert sorted(epoch_indices(1)) == list(range(13))


def test_batch_shapes_and_dtype():
    ds = toy_dataset(4, size=8)
    xb, yb, _ = next(iter(batch_iterator(ds, 2, shuffle_seed=0)))
    assert xb.shape == (2, 1, 8, 8) and yb.shape == (2, 1, 8, 8)
    assert xb.dtype == np.float64
    assert set(np.unique(yb)) <= {0.0, 1.0}


def test_augmented_batches_deterministic():
    ds = toy_dataset(6, size=32)
    policy = AugmentPolicy(elastic_grid=8)
    def run():
        chunks = [xb.tobytes() + yb.tobytes() for xb, yb, _ in batch_iterator(ds, 3, 7, policy, epoch=2)]
        return b"".join(chunks)

    assert run() == run()


def test_empty_dataset_rejected():
    with pytest.raises(InputError):
        next(iter(batch_iterator(SliceDataset([], []), 2, 0)))


def test_manifest_roundtrip(tmp_path):
    p = tmp_path / "manifest.csv"
    rows = [("images/a.svol", "labels/a.svol", "train"), ("images/b.svol", "labels/b.svol", "val")]
    write_manifest(p, rows)
    assert read_manifest(p) == rows


def test_manifest_bad_header(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("x,y\n1,2\n")
    with pytest.raises(InputError):
        read_manifest(p)


def test_load_split_roundtrip(tmp_path):
    cases = generate_phantoms(PhantomSpec(size=16, count=4, seed=1))
    (tmp_path / "images").mkdir()
    (tmp_path / "labels").mkdir()
    rows = []
    for i, c in enumerate(cases):
        img = Volume(c.image[:, :, None], domain="unit")
        lab = Volume(c.mask.astype(np.float32)[:, :, None], domain="label")
        save_volume(img, tmp_path / "images" / f"case_{i:04d}.svol")
        save_volume(lab, tmp_path / "labels" / f"case_{i:04d}.svol")
        split = "train" if i < 3 else "val"
        rows.append((f"images/case_{i:04d}.svol", f"labels/case_{i:04d}.svol", split))
    write_manifest(tmp_path / "manifest.csv", rows)
    train = load_split(tmp_path / "manifest.csv", "train")
    val = load_split(tmp_path / "manifest.csv", "val")
    assert len(train) == 3 and len(val) == 1
    assert np.array_equal(train.images[0], cases[0].image)
    assert np.array_equal(train.labels[0], cases[0].mask)
    with pytest.raises(InputError):
        load_split(tmp_path / "manifest.csv", "test")


def test_load_split_multislice_volume(tmp_path):
    rng = np.random.default_rng(3)
    img = Volume(rng.random((8, 8, 3)).astype(np.float32), domain="unit")
    lab = Volume((rng.random((8, 8, 3)) > 0.5).astype(np.float32), domain="label")
    save_volume(img, tmp_path / "i.svol")
    save_volume(lab, tmp_path / "l.svol")
    write_manifest(tmp_path / "manifest.csv", [("i.svol", "l.svol", "train")])
    ds = load_split(tmp_path / "manifest.csv", "train")
    assert len(ds) == 3
    assert ds.ids == ["i_z000", "i_z001", "i_z002"]
    assert np.array_equal(ds.images[2], img.voxels[:, :, 2])
