"""Dataset manifests and seeded batch iteration with on-the-fly augmentation."""

import csv
import os

import numpy as np

from .augment import augment
from .errors import InputError
from .volume import load_volume


class SliceDataset:
    """In-memory 2D samples: (image float array, binary label, case id, kind tag)."""

    def __init__(self, images, labels, ids=None, kinds=None):
        if len(images) != len(labels):
            raise InputError("images and labels differ in length")
        self.images = [np.asarray(im, dtype=np.float32) for im in images]
        self.labels = [np.asarray(lb, dtype=np.uint8) for lb in labels]
        self.ids = list(ids) if ids is not None else [f"case_{i:04d}" for i in range(len(images))]
        self.kinds = list(kinds) if kinds is not None else ["normal"] * len(images)

    def __len__(self):
        return len(self.images)

    def subset(self, indices):
        return SliceDataset(
            [self.images[i] for i in indices],
            [self.labels[i] for i in indices],
            [self.ids[i] for i in indices],
            [self.kinds[i] for i in indices],
        )


def write_manifest(path, rows):
    """rows: (image_path, label_path, split) triples, paths relative to the manifest."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image_path", "label_path", "split"])
        for row in rows:
            writer.writerow(row)


def read_manifest(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["image_path", "label_path", "split"]:
            raise InputError(f"manifest {path} has unexpected header {header}")
        return [tuple(row) for row in reader]


def load_split(manifest_path, split):
    """Load every 2D slice of the manifest's volumes for one split."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    rows = [r for r in read_manifest(manifest_path) if r[2] == split]
    if not rows:
        raise InputError(f"manifest {manifest_path} has no rows for split {split!r}")
    images, labels, ids = [], [], []
    for image_path, label_path, _ in rows:
        img = load_volume(os.path.join(base, image_path))
        lab = load_volume(os.path.join(base, label_path))
        if img.dims != lab.dims:
            raise InputError(f"image/label dims differ for {image_path}")
        stem = os.path.splitext(os.path.basename(image_path))[0]
        for z in range(img.dims[2]):
            images.append(img.voxels[:, :, z])
            labels.append(lab.voxels[:, :, z].astype(np.uint8))
            ids.append(stem if img.dims[2] == 1 else f"{stem}_z{z:03d}")
    return SliceDataset(images, labels, ids)


def batch_iterator(dataset, batch_size, shuffle_seed, policy=None, epoch=0):
    """Seeded permutation of the dataset in (N,1,S,S) float64 batches.

    Augmentation draws come from a per-sample stream keyed by
    (seed, epoch, index), so results do not depend on scheduling. The
    final partial batch is emitted.
    """
    if batch_size < 1:
        raise InputError("batch_size must be >= 1")
    if len(dataset) == 0:
        raise InputError("empty dataset")
    order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        images, labels = [], []
        for i in idx:
            img = dataset.images[i].astype(np.float64)
            lab = dataset.labels[i]
            if policy is not None:
                rng = np.random.default_rng([shuffle_seed, epoch, int(i)])
                img, lab = augment(img, lab, policy, rng)
            images.append(img)
            labels.append(lab.astype(np.float64))
        yield (
            np.stack(images)[:, None, :, :],
            np.stack(labels)[:, None, :, :],
            idx,
        )
