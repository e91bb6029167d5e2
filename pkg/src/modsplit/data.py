"""Dataset ingestion, synthetic fixtures, splits, and Dirichlet subset sampling."""

from __future__ import annotations

import colorsys
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import IngestionError

SPLIT_TAGS = ("train", "valid", "test", "module_eval")

CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)

_RECORD_BYTES = 3073  # 1 label byte + 32*32*3 pixel bytes


@dataclass(frozen=True)
class LabeledDataset:
    """Immutable image-classification dataset: uint8 images plus integer labels."""

    images: np.ndarray            # (n, H, W, C) uint8
    labels: np.ndarray            # (n,) int64, values in [0, n_classes)
    class_names: tuple[str, ...]
    split_tag: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, H, W, C), got shape {self.images.shape}")
        if self.images.dtype != np.uint8:
            raise ValueError(f"images must be uint8, got {self.images.dtype}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        n = self.n_classes
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= n):
            raise ValueError(f"labels must lie in [0, {n})")
        if self.split_tag not in SPLIT_TAGS:
            raise ValueError(f"split_tag must be one of {SPLIT_TAGS}, got {self.split_tag!r}")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.labels)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, indices: np.ndarray, split_tag: str | None = None) -> "LabeledDataset":
        return LabeledDataset(
            images=self.images[indices],
            labels=self.labels[indices],
            class_names=self.class_names,
            split_tag=split_tag or self.split_tag,
            meta=dict(self.meta),
        )

    def with_tag(self, split_tag: str) -> "LabeledDataset":
        return LabeledDataset(self.images, self.labels, self.class_names, split_tag, dict(self.meta))


@dataclass(frozen=True)
class SubsetPlan:
    """Per-subset class proportions drawn for Dirichlet subset sampling."""

    J: int
    proportions: np.ndarray       # (J, n_classes), entries in (0, 1]
    seed: int
    threshold_t: int
    concentration: float
    mean_fraction: float

    def __post_init__(self):
        if self.proportions.shape[0] != self.J:
            raise ValueError("proportions row count must equal J")
        if np.any(self.proportions <= 0) or np.any(self.proportions > 1):
            raise ValueError("all proportions must lie in (0, 1]")


def load_cifar10_binary(path: str) -> LabeledDataset:
    """Read CIFAR-10 style binary batch files (3073-byte records) from a directory.

    Each record is 1 label byte followed by 3072 pixel bytes laid out as
    row-major R, G, B planes. Record order is preserved across files sorted
    by name.
    """
    files = sorted(
        f for f in os.listdir(path)
        if f.endswith(".bin") and os.path.isfile(os.path.join(path, f))
    )
    if not files:
        raise IngestionError(f"no batch files found in {path}")
    images, labels = [], []
    for name in files:
        fpath = os.path.join(path, name)
        raw = np.fromfile(fpath, dtype=np.uint8)
        n_records, tail = divmod(len(raw), _RECORD_BYTES)
        if tail:
            raise IngestionError(
                f"{fpath}: truncated record {n_records} at byte offset {n_records * _RECORD_BYTES} "
                f"({tail} bytes present, {_RECORD_BYTES} required)"
            )
        if n_records == 0:
            continue
        recs = raw.reshape(n_records, _RECORD_BYTES)
        lbl = recs[:, 0]
        bad = np.nonzero(lbl >= 10)[0]
        if len(bad):
            r = int(bad[0])
            raise IngestionError(
                f"{fpath}: label byte {lbl[r]} out of range at record {r} "
                f"(byte offset {r * _RECORD_BYTES})"
            )
        images.append(recs[:, 1:].reshape(n_records, 3, 32, 32).transpose(0, 2, 3, 1))
        labels.append(lbl.astype(np.int64))
    if not images:
        raise IngestionError(f"no records found in batch files under {path}")
    return LabeledDataset(
        images=np.ascontiguousarray(np.concatenate(images)),
        labels=np.concatenate(labels),
        class_names=CIFAR10_CLASSES,
        split_tag="train",
    )


def _class_palette(n_classes: int) -> np.ndarray:
    hues = [(k / n_classes) % 1.0 for k in range(n_classes)]
    return np.array([colorsys.hsv_to_rgb(h, 1.0, 1.0) for h in hues], dtype=np.float64)


def gen_synthetic(n_classes: int, per_class: int, image_side: int, seed: int) -> LabeledDataset:
    """Deterministic synthetic dataset: one colored Gaussian blob per class.

    Class k gets a distinct hue and a distinct blob center on a ring, jittered
    per image, over low-amplitude background noise. Separable enough for a
    small CNN to exceed 90% test accuracy.
    """
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    side = image_side
    palette = _class_palette(n_classes)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    images = np.empty((n_classes * per_class, side, side, 3), dtype=np.uint8)
    labels = np.empty(n_classes * per_class, dtype=np.int64)
    sigma = side / 6.0
    ring = side / 4.0
    for k in range(n_classes):
        angle = 2 * np.pi * k / n_classes
        cy0 = side / 2 + ring * np.sin(angle)
        cx0 = side / 2 + ring * np.cos(angle)
        for i in range(per_class):
            idx = k * per_class + i
            noise = rng.uniform(0, 150, size=(side, side, 3))
            cy = cy0 + rng.uniform(-side / 7, side / 7)
            cx = cx0 + rng.uniform(-side / 7, side / 7)
            amp = rng.uniform(70, 150)
            bump = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma * sigma)))
            img = noise + amp * bump[:, :, None] * palette[k][None, None, :]
            images[idx] = np.clip(img, 0, 255).astype(np.uint8)
            labels[idx] = k
    names = tuple(f"blob{k}" for k in range(n_classes))
    return LabeledDataset(images=images, labels=labels, class_names=names, split_tag="train")


def dirichlet_subsets(
    dataset: LabeledDataset,
    J: int,
    concentration: float,
    threshold_t: int,
    seed: int,
    mean_fraction: float = 0.5,
) -> tuple[SubsetPlan, list[LabeledDataset]]:
    """Draw J class-imbalanced subsets with Dirichlet-distributed proportions.

    For each subset j a vector q_j ~ Dirichlet(concentration * 1) is drawn and
    the per-class proportion is p_j^n = min(1, n_classes * mean_fraction * q_j^n).
    The whole proportion vector is redrawn until every p_j^n * |D^n| >=
    threshold_t. Subsets are sampled independently of each other (they may
    overlap), uniformly without replacement within a subset.
    """
    if J < 1:
        raise ValueError("J must be >= 1")
    if concentration <= 0:
        raise ValueError("concentration must be positive")
    counts = dataset.class_counts()
    n = dataset.n_classes
    if np.any(counts < threshold_t):
        short = int(np.argmin(counts))
        raise ValueError(
            f"threshold_t={threshold_t} impossible: class {short} has only {counts[short]} samples"
        )
    rng = np.random.default_rng(seed)
    props = np.empty((J, n), dtype=np.float64)
    for j in range(J):
        for attempt in range(10_000):
            q = rng.dirichlet(np.full(n, concentration))
            p = np.minimum(1.0, n * mean_fraction * q)
            if np.all(p * counts >= threshold_t):
                props[j] = p
                break
        else:
            raise ValueError("could not satisfy threshold_t after 10000 redraws")
    class_indices = [np.nonzero(dataset.labels == c)[0] for c in range(n)]
    subsets = []
    for j in range(J):
        picks = []
        for c in range(n):
            take = int(np.rint(props[j, c] * counts[c]))
            picks.append(rng.choice(class_indices[c], size=take, replace=False))
        idx = np.sort(np.concatenate(picks))
        subsets.append(dataset.subset(idx))
    plan = SubsetPlan(
        J=J, proportions=props, seed=seed, threshold_t=threshold_t,
        concentration=concentration, mean_fraction=mean_fraction,
    )
    return plan, subsets


def make_binary_view(dataset: LabeledDataset, target_class: int) -> LabeledDataset:
    """Relabel to 1 (== target_class) / 0 (otherwise); images are shared, not copied."""
    if not 0 <= target_class < dataset.n_classes:
        raise ValueError(f"target_class {target_class} out of range [0, {dataset.n_classes})")
    meta = dict(dataset.meta)
    meta.update(source_n_classes=dataset.n_classes, target_class=target_class)
    return LabeledDataset(
        images=dataset.images,
        labels=(dataset.labels == target_class).astype(np.int64),
        class_names=(f"not_{dataset.class_names[target_class]}", dataset.class_names[target_class]),
        split_tag=dataset.split_tag,
        meta=meta,
    )


def _allot(total: int, fractions) -> np.ndarray:
    """Largest-remainder allocation of `total` items across fractions."""
    raw = np.asarray(fractions, dtype=np.float64) * total
    base = np.floor(raw).astype(np.int64)
    rem = total - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:rem]] += 1
    return base


def split_ratio(
    dataset: LabeledDataset,
    fractions,
    seed: int,
    stratified: bool = True,
    tags: list[str] | None = None,
) -> list[LabeledDataset]:
    """Randomly split into disjoint parts whose sizes follow `fractions`."""
    fractions = list(fractions)
    if any(f <= 0 for f in fractions):
        raise ValueError("fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    if tags is not None and len(tags) != len(fractions):
        raise ValueError("tags must match fractions in length")
    rng = np.random.default_rng(seed)
    parts = [[] for _ in fractions]
    if stratified:
        for c in range(dataset.n_classes):
            idx = np.nonzero(dataset.labels == c)[0]
            rng.shuffle(idx)
            sizes = _allot(len(idx), fractions)
            pos = 0
            for p, s in enumerate(sizes):
                parts[p].append(idx[pos:pos + s])
                pos += s
    else:
        idx = np.arange(len(dataset))
        rng.shuffle(idx)
        sizes = _allot(len(idx), fractions)
        pos = 0
        for p, s in enumerate(sizes):
            parts[p].append(idx[pos:pos + s])
            pos += s
    out = []
    for p, chunks in enumerate(parts):
        sel = np.sort(np.concatenate(chunks)) if chunks else np.empty(0, dtype=np.int64)
        out.append(dataset.subset(sel, split_tag=tags[p] if tags else None))
    return out


def payload_sha256(dataset: LabeledDataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(dataset.images).tobytes())
    h.update(np.ascontiguousarray(dataset.labels).tobytes())
    return h.hexdigest()


def save_dataset(dataset: LabeledDataset, out_dir: str, name: str) -> str:
    """Write payload.npz plus a manifest.json; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    np.savez_compressed(
        os.path.join(out_dir, "payload.npz"),
        images=dataset.images,
        labels=dataset.labels,
        class_names=np.array(dataset.class_names),
    )
    manifest = {
        "name": name,
        "n_classes": dataset.n_classes,
        "counts_per_class": dataset.class_counts().tolist(),
        "sha256": payload_sha256(dataset),
        "split_tag": dataset.split_tag,
    }
    mpath = os.path.join(out_dir, "manifest.json")
    with open(mpath, "w") as f:
        json.dump(manifest, f, indent=2)
    return mpath


def load_dataset(path: str) -> LabeledDataset:
    """Load a dataset saved by save_dataset; `path` is the directory or manifest file."""
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    with open(path) as f:
        manifest = json.load(f)
    payload = np.load(os.path.join(os.path.dirname(path), "payload.npz"))
    ds = LabeledDataset(
        images=payload["images"],
        labels=payload["labels"],
        class_names=tuple(str(s) for s in payload["class_names"]),
        split_tag=manifest["split_tag"],
        meta={"name": manifest["name"]},
    )
    if payload_sha256(ds) != manifest["sha256"]:
        raise IngestionError(f"payload hash mismatch for {path}")
    return ds
