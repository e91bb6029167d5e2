"""Per-kernel importance scoring, GA search-space grouping, and layer sensitivity probing."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from .data import LabeledDataset
from .models import TrainedModel

DEFAULT_IMPORTANCE_CAP = 1000
DEFAULT_DROP_RATIOS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass(frozen=True)
class ImportanceTable:
    """Mean feature-map sum per kernel for one class (pre-activation conv outputs)."""

    scores: np.ndarray            # (L,) float64
    class_id: int
    m: int
    model_hash: str

    def __post_init__(self):
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("importance scores must be finite")


@dataclass(frozen=True)
class Segment:
    """One genome segment: a layer (or residual-tied layers) chunked into kernel groups."""

    layer_ids: tuple[int, ...]
    groups: tuple[tuple[int, ...], ...]   # kernel ids, ordered by descending importance


@dataclass(frozen=True)
class GroupingPlan:
    class_id: int
    segments: tuple[Segment, ...]
    total_kernels: int
    model_hash: str

    @property
    def n_bits(self) -> int:
        return sum(len(s.groups) for s in self.segments)

    def segment_bit_slice(self, seg_idx: int) -> slice:
        start = sum(len(s.groups) for s in self.segments[:seg_idx])
        return slice(start, start + len(self.segments[seg_idx].groups))

    def decode_bits(self, bits: np.ndarray, kernel_slices) -> np.ndarray:
        """Expand a group bit-vector into a per-kernel retained vector of length L."""
        bits = np.asarray(bits, dtype=np.uint8)
        if len(bits) != self.n_bits:
            raise ValueError(f"expected {self.n_bits} bits, got {len(bits)}")
        retained = np.zeros(self.total_kernels, dtype=np.uint8)
        pos = 0
        for seg in self.segments:
            for g, kernels in enumerate(seg.groups):
                if bits[pos + g]:
                    for layer in seg.layer_ids:
                        sl = kernel_slices(layer)
                        for k in kernels:
                            retained[sl.start + k] = 1
            pos += len(seg.groups)
        return retained


@dataclass(frozen=True)
class SensitivityProfile:
    """Per-layer sensitive/insensitive labels derived from kernel-removal accuracy curves."""

    labels: tuple[str, ...]
    acc_curve: np.ndarray         # (n_layers, n_ratios)
    drop_ratios: tuple[float, ...]
    baseline_acc: float
    threshold: float
    model_hash: str

    def is_sensitive(self, layer: int) -> bool:
        return self.labels[layer] == "sensitive"


def _feature_sums(tm: TrainedModel, images: np.ndarray, batch_size: int = 256,
                  post_activation: bool = False) -> np.ndarray:
    """(B, L) sums of each kernel's own conv output (optionally after ReLU)."""
    out = []
    tm.net.eval()
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = tm.normalize(images[i:i + batch_size])
            captured: list[torch.Tensor] = []
            tm.net(x, conv_outputs=captured)
            if post_activation:
                captured = [torch.relu(c) for c in captured]
            out.append(torch.cat([c.sum(dim=(2, 3)) for c in captured], dim=1).numpy())
    return np.concatenate(out)


def kernel_importance(tm: TrainedModel, train: LabeledDataset, class_id: int,
                      m: int | None = None, post_activation: bool = False) -> ImportanceTable:
    """Score each kernel by the mean feature-map sum over m class samples.

    Sums are taken over the kernel's own conv output, pre-activation by
    default (set post_activation to sum after the ReLU instead). Samples are
    the first m occurrences of the class in dataset order; m defaults to the
    class population capped at 1000.
    """
    idx = np.nonzero(train.labels == class_id)[0]
    if m is None:
        m = min(len(idx), DEFAULT_IMPORTANCE_CAP)
    if m < 1 or m > len(idx):
        raise ValueError(f"m={m} but class {class_id} has {len(idx)} samples")
    sums = _feature_sums(tm, train.images[idx[:m]], post_activation=post_activation)
    return ImportanceTable(scores=sums.mean(axis=0).astype(np.float64), class_id=class_id,
                           m=m, model_hash=tm.model_hash())


def all_class_importance(tm: TrainedModel, train: LabeledDataset,
                         m: int | None = None,
                         post_activation: bool = False) -> list[ImportanceTable]:
    return [kernel_importance(tm, train, c, m, post_activation)
            for c in range(train.n_classes)]


def class_agnostic_scores(tables) -> np.ndarray:
    return np.mean([t.scores for t in tables], axis=0)


def group_kernels(tm: TrainedModel, importance, class_id: int,
                  groups: int | None = None, class_agnostic: bool = False) -> GroupingPlan:
    """Chunk each layer's kernels into contiguous groups by descending importance.

    Group count defaults to 10 for layers under 256 kernels and 100 otherwise;
    pass `groups` to force a constant count (desk fixtures use 8). Residual-tied
    layers are merged into one segment ranked by their summed importance.
    With class_agnostic, the ordering uses the mean importance over all classes
    (requires the full table list) while the plan still belongs to class_id.
    """
    if class_agnostic:
        if isinstance(importance, ImportanceTable):
            raise ValueError("class_agnostic grouping needs the per-class table list")
        scores = class_agnostic_scores(importance)
        model_hash = importance[0].model_hash
    else:
        table = importance if isinstance(importance, ImportanceTable) else importance[class_id]
        if table.class_id != class_id:
            raise ValueError(f"importance is for class {table.class_id}, requested {class_id}")
        scores = table.scores
        model_hash = table.model_hash
    spec = tm.spec
    segments = []
    for tied in spec.tied_layer_groups():
        width = spec.conv_layers[tied[0]].out_kernels
        imp = np.zeros(width)
        for layer in tied:
            imp += scores[spec.kernel_slice(layer)]
        order = np.argsort(-imp, kind="stable")
        g = groups if groups is not None else (10 if width < 256 else 100)
        g = min(g, width)
        chunks = tuple(tuple(int(k) for k in part) for part in np.array_split(order, g))
        segments.append(Segment(layer_ids=tuple(tied), groups=chunks))
    return GroupingPlan(class_id=class_id, segments=tuple(segments),
                        total_kernels=spec.total_kernels, model_hash=model_hash)


def masked_accuracy(tm: TrainedModel, dataset: LabeledDataset, kernel_scales: np.ndarray,
                    batch_size: int = 512) -> float:
    """Accuracy of the model with per-kernel output scaling (0 = kernel removed)."""
    spec = tm.spec
    scales = []
    for l in range(len(spec.conv_layers)):
        v = kernel_scales[spec.kernel_slice(l)]
        scales.append(torch.from_numpy(v.astype(np.float32)).view(1, -1, 1, 1))
    correct = 0
    tm.net.eval()
    with torch.no_grad():
        for i in range(0, len(dataset), batch_size):
            x = tm.normalize(dataset.images[i:i + batch_size])
            logits = tm.net(x, channel_scales=scales)
            correct += int((logits.argmax(dim=1).numpy() == dataset.labels[i:i + batch_size]).sum())
    return correct / len(dataset)


def layer_sensitivity(tm: TrainedModel, valid: LabeledDataset,
                      drop_ratios=DEFAULT_DROP_RATIOS,
                      acc_loss_threshold: float = 0.05,
                      importance=None) -> SensitivityProfile:
    """Probe each layer in isolation by removing its lowest-importance kernels.

    A layer is insensitive iff the accuracy loss at the highest drop ratio is
    within the threshold. Ranking uses class-agnostic mean importance; when no
    importance tables are given, feature-map sums over the probe dataset are
    used instead.
    """
    drop_ratios = tuple(drop_ratios)
    if any(not 0 < r < 1 for r in drop_ratios):
        raise ValueError("drop ratios must lie in (0, 1)")
    spec = tm.spec
    if importance is None:
        scores = _feature_sums(tm, valid.images).mean(axis=0)
    else:
        scores = class_agnostic_scores(importance)
    baseline = masked_accuracy(tm, valid, np.ones(spec.total_kernels))
    n_layers = len(spec.conv_layers)
    curve = np.zeros((n_layers, len(drop_ratios)))
    for l in range(n_layers):
        sl = spec.kernel_slice(l)
        order = np.argsort(scores[sl], kind="stable")   # ascending importance
        width = sl.stop - sl.start
        for ri, r in enumerate(drop_ratios):
            k = int(r * width)
            scales = np.ones(spec.total_kernels)
            scales[sl.start + order[:k]] = 0.0
            curve[l, ri] = masked_accuracy(tm, valid, scales)
    max_ri = int(np.argmax(drop_ratios))
    labels = tuple(
        "insensitive" if baseline - curve[l, max_ri] <= acc_loss_threshold else "sensitive"
        for l in range(n_layers)
    )
    return SensitivityProfile(labels=labels, acc_curve=curve, drop_ratios=drop_ratios,
                              baseline_acc=baseline, threshold=acc_loss_threshold,
                              model_hash=tm.model_hash())


# --- artifact files, keyed by model hash -----------------------------------

def save_analysis(out_dir: str, importance: list[ImportanceTable],
                  groupings: list[GroupingPlan], sensitivity: SensitivityProfile) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "importance.json"), "w") as f:
        json.dump({"model_hash": importance[0].model_hash,
                   "tables": [{"class_id": t.class_id, "m": t.m,
                               "scores": t.scores.tolist()} for t in importance]}, f)
    with open(os.path.join(out_dir, "grouping.json"), "w") as f:
        json.dump({"model_hash": groupings[0].model_hash,
                   "plans": [{"class_id": p.class_id, "total_kernels": p.total_kernels,
                              "segments": [{"layer_ids": list(s.layer_ids),
                                            "groups": [list(g) for g in s.groups]}
                                           for s in p.segments]} for p in groupings]}, f)
    with open(os.path.join(out_dir, "sensitivity.json"), "w") as f:
        json.dump({"model_hash": sensitivity.model_hash,
                   "labels": list(sensitivity.labels),
                   "acc_curve": sensitivity.acc_curve.tolist(),
                   "drop_ratios": list(sensitivity.drop_ratios),
                   "baseline_acc": sensitivity.baseline_acc,
                   "threshold": sensitivity.threshold}, f)


def load_analysis(path: str) -> tuple[list[ImportanceTable], list[GroupingPlan], SensitivityProfile]:
    with open(os.path.join(path, "importance.json")) as f:
        imp = json.load(f)
    tables = [ImportanceTable(scores=np.array(t["scores"]), class_id=t["class_id"],
                              m=t["m"], model_hash=imp["model_hash"])
              for t in imp["tables"]]
    with open(os.path.join(path, "grouping.json")) as f:
        grp = json.load(f)
    plans = [GroupingPlan(class_id=p["class_id"],
                          segments=tuple(Segment(layer_ids=tuple(s["layer_ids"]),
                                                 groups=tuple(tuple(g) for g in s["groups"]))
                                         for s in p["segments"]),
                          total_kernels=p["total_kernels"], model_hash=grp["model_hash"])
             for p in grp["plans"]]
    with open(os.path.join(path, "sensitivity.json")) as f:
        sen = json.load(f)
    profile = SensitivityProfile(labels=tuple(sen["labels"]),
                                 acc_curve=np.array(sen["acc_curve"]),
                                 drop_ratios=tuple(sen["drop_ratios"]),
                                 baseline_acc=sen["baseline_acc"],
                                 threshold=sen["threshold"], model_hash=sen["model_hash"])
    return tables, plans, profile


def build_analysis(tm: TrainedModel, train: LabeledDataset, valid: LabeledDataset,
                   groups: int | None = None, m: int | None = None,
                   class_agnostic: bool = False):
    """Convenience: importance for every class, per-class groupings, sensitivity."""
    tables = all_class_importance(tm, train, m)
    plans = [group_kernels(tm, tables, c, groups=groups, class_agnostic=class_agnostic)
             for c in range(train.n_classes)]
    profile = layer_sensitivity(tm, valid, importance=tables)
    return tables, plans, profile
