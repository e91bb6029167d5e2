"""Decode genomes/masks into sliced modules; compose, evaluate, recommend, and patch."""

from __future__ import annotations

import base64
import copy
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn

from .data import LabeledDataset, make_binary_view
from .errors import CalibrationError, CompositionError, DecodeError
from .models import CnnModel, TrainedModel, count_flops, input_channel_sources

BUNDLE_FORMAT = "modsplit-module/1"


class SlicedModule:
    """Standalone per-class module: a physically sliced network plus optional head."""

    def __init__(self, model: TrainedModel, class_id: int, parent_hash: str,
                 retained: np.ndarray, head: nn.Module | None = None,
                 provenance: str = "ga", metrics: dict | None = None):
        self.model = model
        self.class_id = class_id
        self.parent_hash = parent_hash
        self.retained = retained
        self.head = head
        self.provenance = provenance
        self.metrics = metrics or {}

    @property
    def n_classes(self) -> int:
        return self.model.spec.n_classes

    def retained_fraction(self) -> float:
        return float(self.retained.mean())

    def logits(self, images: np.ndarray) -> np.ndarray:
        return self.model.predict(images)

    def score(self, images: np.ndarray) -> np.ndarray:
        """Per-sample score: head sigmoid output if present, else the module's own logit."""
        logits = self.logits(images)
        if self.head is None:
            return logits[:, self.class_id]
        self.head.eval()
        with torch.no_grad():
            return self.head(torch.from_numpy(logits)).numpy().ravel()

    def binary_decision(self, images: np.ndarray) -> np.ndarray:
        """Positive-class decision: sigmoid > 0.5 with a head, else own-logit argmax."""
        if self.head is not None:
            return self.score(images) > 0.5
        return np.argmax(self.logits(images), axis=1) == self.class_id

    def flops(self):
        return count_flops(self.model.spec)

    def save(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        self.model.save(os.path.join(out_dir, "sliced"))
        info = {
            "format": BUNDLE_FORMAT,
            "model_hash": self.parent_hash,
            "class_id": self.class_id,
            "provenance": self.provenance,
            "mask_bits": base64.b64encode(np.packbits(self.retained)).decode(),
            "mask_len": int(len(self.retained)),
            "metrics": self.metrics,
        }
        with open(os.path.join(out_dir, "bundle.json"), "w") as f:
            json.dump(info, f, indent=2)
        with open(os.path.join(out_dir, "metrics.json"), "w") as f:
            json.dump(self.metrics, f, indent=2)
        if self.head is not None:
            arrays = {k: v.numpy() for k, v in self.head.state_dict().items()}
            np.savez(os.path.join(out_dir, "head.npz"), **arrays)

    @staticmethod
    def load(path: str) -> "SlicedModule":
        with open(os.path.join(path, "bundle.json")) as f:
            info = json.load(f)
        if info.get("format") != BUNDLE_FORMAT:
            raise ValueError(f"unsupported module format {info.get('format')!r}")
        model = TrainedModel.load(os.path.join(path, "sliced"))
        retained = np.unpackbits(
            np.frombuffer(base64.b64decode(info["mask_bits"]), dtype=np.uint8)
        )[: info["mask_len"]].astype(np.uint8)
        head = None
        head_path = os.path.join(path, "head.npz")
        if os.path.exists(head_path):
            blob = np.load(head_path)
            head = _make_head(model.spec.n_classes)
            head.load_state_dict({k: torch.from_numpy(blob[k]) for k in blob.files})
        return SlicedModule(model, info["class_id"], info["model_hash"], retained, head,
                            info.get("provenance", "ga"), info.get("metrics", {}))


def _make_head(n_classes: int) -> nn.Module:
    head = nn.Sequential(nn.Linear(n_classes, n_classes), nn.ReLU(),
                         nn.Linear(n_classes, 1), nn.Sigmoid())
    # small random init keeps the sigmoid out of saturation for large input logits
    for layer in head:
        if isinstance(layer, nn.Linear):
            nn.init.uniform_(layer.weight, -0.1, 0.1)
            nn.init.zeros_(layer.bias)
    return head


def decode(tm: TrainedModel, retained: np.ndarray, head: nn.Module | None = None,
           class_id: int = 0, provenance: str = "ga") -> SlicedModule:
    """Physically remove dropped kernels and trim downstream input channels.

    Removing kernel k of layer a drops feature map k, so every consumer's
    weight slab for that input channel is removed as well, including the
    first FC layer's column block for removed final-feature-map channels.
    The resulting module's forward equals the masked-TM forward.
    """
    spec = tm.spec
    graph = tm.net.graph
    retained = np.asarray(retained).astype(np.uint8)
    if len(retained) != spec.total_kernels:
        raise DecodeError(f"retained vector length {len(retained)} != {spec.total_kernels}")
    keep = {l: np.nonzero(retained[spec.kernel_slice(l)])[0]
            for l in range(len(spec.conv_layers))}
    for l, kept in keep.items():
        if len(kept) == 0:
            raise DecodeError(f"layer {l} has zero retained kernels")
    for a, b in spec.residual_pairs:
        if not np.array_equal(keep[a], keep[b]):
            raise DecodeError(f"residual pair ({a}, {b}) retained kernel sets differ")

    new_spec = replace(
        spec,
        conv_layers=tuple(replace(cs, out_kernels=len(keep[l]))
                          for l, cs in enumerate(spec.conv_layers)),
    )
    new_net = CnnModel(new_spec)
    state = tm.net.state_dict()
    new_state = {}
    for l in range(len(spec.conv_layers)):
        w = state[f"convs.{l}.weight"].numpy()
        b = state[f"convs.{l}.bias"].numpy()
        in_keep = []
        offset = 0
        for s in graph.sources[l]:
            width = spec.image_channels if s == -1 else spec.conv_layers[s].out_kernels
            if s == -1:
                in_keep.extend(range(offset, offset + width))
            else:
                in_keep.extend(offset + k for k in keep[s])
            offset += width
        new_state[f"convs.{l}.weight"] = torch.from_numpy(
            np.ascontiguousarray(w[keep[l]][:, in_keep]))
        new_state[f"convs.{l}.bias"] = torch.from_numpy(np.ascontiguousarray(b[keep[l]]))
    hw = graph.flatten_side ** 2
    cols = []
    offset = 0
    for s in graph.sink_layers:
        for k in keep[s]:
            start = (offset + k) * hw
            cols.append(np.arange(start, start + hw))
        offset += spec.conv_layers[s].out_kernels
    col_idx = np.concatenate(cols)
    for i in range(len(spec.fc_layers)):
        w = state[f"fcs.{i}.weight"].numpy()
        if i == 0:
            w = w[:, col_idx]
        new_state[f"fcs.{i}.weight"] = torch.from_numpy(np.ascontiguousarray(w))
        new_state[f"fcs.{i}.bias"] = state[f"fcs.{i}.bias"].clone()
    new_net.load_state_dict(new_state)
    model = TrainedModel(new_spec, new_net, tm.norm_mean.copy(), tm.norm_std.copy(),
                         metrics={"parent_valid_acc": tm.metrics.get("valid_acc")})
    return SlicedModule(model, class_id, tm.model_hash(), retained,
                        copy.deepcopy(head), provenance)


class ComposedModel:
    """N per-class modules aggregated into an N-class classifier."""

    def __init__(self, modules, mode: str = "parallel", calibration=None):
        modules = list(modules)
        if not modules:
            raise CompositionError("no modules given")
        n = modules[0].n_classes
        ids = sorted(m.class_id for m in modules)
        if ids != list(range(n)):
            raise CompositionError(
                f"need exactly one module per class in [0, {n}), got class ids {ids}")
        if mode not in ("parallel", "serial"):
            raise CompositionError(f"unknown mode {mode!r}")
        if calibration is not None and len(calibration) != len(modules):
            raise CompositionError("calibration must provide (min, max) per module")
        self.modules = sorted(modules, key=lambda m: m.class_id)
        self.mode = mode
        self.calibration = calibration

    @property
    def n_classes(self) -> int:
        return len(self.modules)

    def _module_score(self, k: int, images: np.ndarray) -> np.ndarray:
        s = self.modules[k].score(images)
        if self.calibration is not None:
            lo, hi = self.calibration[k]
            s = (s - lo) / (hi - lo)
        return s

    def scores(self, images: np.ndarray) -> np.ndarray:
        """(B, N) matrix whose kth column is module k's standalone score."""
        out = np.empty((len(images), self.n_classes), dtype=np.float64)
        if self.mode == "parallel":
            with ThreadPoolExecutor(max_workers=self.n_classes) as pool:
                futures = [pool.submit(self._module_score, k, images)
                           for k in range(self.n_classes)]
                for k, fut in enumerate(futures):
                    out[:, k] = fut.result()
        else:
            for k in range(self.n_classes):
                col = self._module_score(k, images)
                out[:, k] = col
                del col
        return out

    def predict(self, images: np.ndarray) -> np.ndarray:
        return np.argmax(self.scores(images), axis=1)

    def accuracy(self, dataset: LabeledDataset) -> float:
        return float(np.mean(self.predict(dataset.images) == dataset.labels))

    def save_manifest(self, out_path: str, module_paths) -> None:
        manifest = {
            "module_paths": list(module_paths),
            "mode": self.mode,
            "calibration": None if self.calibration is None
            else [[float(lo), float(hi)] for lo, hi in self.calibration],
        }
        with open(out_path, "w") as f:
            json.dump(manifest, f, indent=2)

    @staticmethod
    def load_manifest(path: str) -> "ComposedModel":
        with open(path) as f:
            manifest = json.load(f)
        modules = [SlicedModule.load(p) for p in manifest["module_paths"]]
        calib = manifest.get("calibration")
        return ComposedModel(modules, manifest["mode"],
                             None if calib is None else [tuple(c) for c in calib])


def compose(modules, mode: str = "parallel", calibration=None) -> ComposedModel:
    return ComposedModel(modules, mode, calibration)


def f1(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if not (0 <= precision <= 1 and 0 <= recall <= 1):
        raise ValueError("precision and recall must lie in [0, 1]")
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def binary_f1(decisions: np.ndarray, labels: np.ndarray) -> float:
    tp = int(np.sum(decisions & (labels == 1)))
    fp = int(np.sum(decisions & (labels == 0)))
    fn = int(np.sum(~decisions & (labels == 1)))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return f1(p, r)


@dataclass
class RecommendResult:
    f1_table: np.ndarray          # (J, N)
    best_index: list[int]
    best: list[SlicedModule]

    def rows(self):
        j, n = self.f1_table.shape
        for tc in range(n):
            yield {"target_class": tc, "best_module": self.best_index[tc],
                   **{f"m{i}": self.f1_table[i, tc] for i in range(j)}}


def evaluate_and_recommend(candidates, eval_data: LabeledDataset) -> RecommendResult:
    """Score each candidate module by positive-class F1 on its one-vs-rest view.

    `candidates` maps class id -> equally long candidate lists. Grad modules
    decide via sigmoid > 0.5, GA modules via own-logit argmax. Ties go to the
    lower candidate index.
    """
    n = eval_data.n_classes
    missing = [c for c in range(n) if c not in candidates]
    if missing:
        raise ValueError(f"no candidate modules for classes {missing}")
    counts = eval_data.class_counts()
    if np.any(counts == 0):
        raise ValueError(f"eval data missing classes {np.nonzero(counts == 0)[0].tolist()}")
    j = len(candidates[0])
    if any(len(candidates[c]) != j for c in range(n)):
        raise ValueError("every class needs the same number of candidates")
    table = np.zeros((j, n))
    best_index, best = [], []
    for tc in range(n):
        view = make_binary_view(eval_data, tc)
        for i, module in enumerate(candidates[tc]):
            if module.class_id != tc:
                raise ValueError(f"candidate {i} for class {tc} has class_id {module.class_id}")
            table[i, tc] = binary_f1(module.binary_decision(view.images), view.labels)
        pick = int(np.argmax(table[:, tc]))          # argmax takes the lower index on ties
        best_index.append(pick)
        best.append(candidates[tc][pick])
    return RecommendResult(f1_table=table, best_index=best_index, best=best)


class PatchedModel:
    """A weak model whose target-class output is replaced by a calibrated module score."""

    def __init__(self, weak: TrainedModel, patch: SlicedModule, tc: int,
                 calibration: tuple[float, float]):
        self.weak = weak
        self.patch_module = patch
        self.tc = tc
        self.calibration = calibration

    def output_vectors(self, images: np.ndarray) -> np.ndarray:
        logits = self.weak.predict(images).astype(np.float64)
        z = logits - logits.max(axis=1, keepdims=True)
        ew = np.exp(z)
        probs = ew / ew.sum(axis=1, keepdims=True)
        lo, hi = self.calibration
        probs[:, self.tc] = (self.patch_module.score(images) - lo) / (hi - lo)
        return probs

    def predict(self, images: np.ndarray) -> np.ndarray:
        return np.argmax(self.output_vectors(images), axis=1)


def patch(weak: TrainedModel, module: SlicedModule, tc: int,
          calib_data: LabeledDataset) -> PatchedModel:
    """Calibrate the module's output range on class-tc training samples and splice it in."""
    if module.class_id != tc:
        raise ValueError(f"module recognizes class {module.class_id}, not {tc}")
    if not 0 <= tc < weak.spec.n_classes:
        raise ValueError(f"tc {tc} outside the weak model's class space")
    if len(calib_data) == 0:
        raise ValueError("calibration data is empty")
    if np.any(calib_data.labels != tc):
        raise ValueError("calibration data must contain only class-tc samples")
    s = module.score(calib_data.images)
    lo, hi = float(s.min()), float(s.max())
    if hi == lo:
        raise CalibrationError("degenerate module output range")
    return PatchedModel(weak, module, tc, (lo, hi))
