"""Gradient-trained binarized kernel masks with per-class heads (straight-through estimator)."""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import composer
from .data import LabeledDataset
from .models import TrainedModel


class _BinSTE(torch.autograd.Function):
    """x -> 1[x > 0]; gradient: upstream clipped to [-1, 1] passes straight through."""

    @staticmethod
    def forward(ctx, x):
        return (x > 0).to(x.dtype)

    @staticmethod
    def backward(ctx, grad):
        return grad.clamp(-1.0, 1.0)


def binarize(x) -> np.ndarray:
    """1 where x > 0, else 0 (zero maps to 0)."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("binarize requires finite entries")
    return (arr > 0).astype(np.uint8)


def default_actions(epochs: int) -> tuple[int, ...]:
    """Heads-only for the first 5 epochs, then 5 joint epochs followed by 2 heads-only."""
    actions = [0] * min(5, epochs)
    cycle = [1, 1, 1, 1, 1, 0, 0]
    while len(actions) < epochs:
        actions.extend(cycle)
    return tuple(actions[:epochs])


@dataclass
class GradConfig:
    epochs: int = 145             # E
    lr: float = 1e-3
    beta: float = 0.1             # loss2 weight
    actions: tuple[int, ...] | None = None
    batch_size: int | None = None # None: inherit the TM's training batch size, else 32
    seed: int = 0
    head_lr: float | None = None  # optional split learning rates; None = lr
    mask_lr: float | None = None

    def resolved_actions(self) -> tuple[int, ...]:
        if self.actions is not None:
            if len(self.actions) != self.epochs:
                raise ValueError("actions length must equal epochs")
            return tuple(self.actions)
        return default_actions(self.epochs)


class MaskSet:
    """Per-class real-valued kernel masks; residual-tied layers share entries.

    The stored parameter has one entry per kernel slot (tied layers collapse
    to one slot per kernel index); the per-kernel view of length L expands
    slots through `slot_map`.
    """

    def __init__(self, tm: TrainedModel, n_classes: int, seed: int = 0):
        spec = tm.spec
        self.spec = spec
        slot_map = np.empty(spec.total_kernels, dtype=np.int64)
        slot = 0
        for tied in spec.tied_layer_groups():
            width = spec.conv_layers[tied[0]].out_kernels
            for layer in tied:
                sl = spec.kernel_slice(layer)
                slot_map[sl] = np.arange(slot, slot + width)
            slot += width
        self.slot_map = torch.from_numpy(slot_map)
        self.n_slots = slot
        gen = torch.Generator().manual_seed(seed)
        # uniform in (0, 1]: every kernel starts retained
        self.params = [nn.Parameter(1.0 - torch.rand(slot, generator=gen))
                       for _ in range(n_classes)]
        self._live: list[torch.Tensor] | None = None

    @property
    def n_classes(self) -> int:
        return len(self.params)

    @property
    def total_kernels(self) -> int:
        return len(self.slot_map)

    def kernel_values(self) -> np.ndarray:
        """(N, L) real-valued per-kernel view."""
        with torch.no_grad():
            return np.stack([p[self.slot_map].numpy() for p in self.params])

    def binarized(self) -> np.ndarray:
        """(N, L) binarized per-kernel view."""
        return binarize(self.kernel_values())

    def retained_fraction(self) -> float:
        return float(self.binarized().mean())


class HeadSet:
    """Per-class output heads: two FC layers (N -> N -> 1) and a sigmoid."""

    def __init__(self, n_classes: int, seed: int = 0):
        torch.manual_seed(seed)
        self.nets = [composer._make_head(n_classes) for _ in range(n_classes)]

    @property
    def n_classes(self) -> int:
        return len(self.nets)

    def parameters(self):
        for net in self.nets:
            yield from net.parameters()

    def state_dicts(self):
        return [copy.deepcopy(net.state_dict()) for net in self.nets]

    def load_state_dicts(self, states):
        for net, st in zip(self.nets, states):
            net.load_state_dict(st)


def _channel_scales(spec, expanded: torch.Tensor, batch: int):
    """Turn an (N, L) kernel multiplier matrix into per-layer (N*B, C, 1, 1) scales."""
    n = expanded.shape[0]
    scales = []
    for l in range(len(spec.conv_layers)):
        s = expanded[:, spec.kernel_slice(l)]
        scales.append(s.unsqueeze(1).expand(n, batch, s.shape[1]).reshape(n * batch, -1, 1, 1))
    return scales


def _module_probs(tm: TrainedModel, heads: HeadSet, masks: MaskSet,
                  binarized_slots, x: torch.Tensor) -> torch.Tensor:
    """All-class module probabilities for a normalized batch: (B, N)."""
    n = len(binarized_slots)
    b = x.shape[0]
    expanded = torch.stack([m.index_select(0, masks.slot_map) for m in binarized_slots])
    xs = x.repeat(n, 1, 1, 1)
    logits = tm.net(xs, channel_scales=_channel_scales(tm.spec, expanded, b))
    logits = logits.view(n, b, -1)
    return torch.cat([heads.nets[i](logits[i]) for i in range(n)], dim=1)


def forward(masks: MaskSet, heads: HeadSet, tm: TrainedModel, batch) -> torch.Tensor:
    """Masked-TM forward through every class head; binarized masks are kept for backward."""
    if isinstance(batch, np.ndarray):
        batch = tm.normalize(batch)
    mb = [_BinSTE.apply(p) for p in masks.params]
    masks._live = mb
    return _module_probs(tm, heads, masks, mb, batch)


def losses(pred: torch.Tensor, labels: torch.Tensor, masks: MaskSet,
           binarized=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Cross entropy over softmax-normalized module outputs, plus retained-kernel fraction."""
    loss1 = F.cross_entropy(pred, labels)
    mb = binarized if binarized is not None else [_BinSTE.apply(p) for p in masks.params]
    total = sum(m.index_select(0, masks.slot_map).sum() for m in mb)
    loss2 = total / (masks.n_classes * masks.total_kernels)
    return loss1, loss2


def backward(masks: MaskSet, heads: HeadSet, pred: torch.Tensor, labels: torch.Tensor,
             epoch: int, cfg: GradConfig, batch_idx: int = -1) -> tuple[float, float]:
    """One plain gradient-descent step; heads-only when the epoch's action bit is 0."""
    if masks._live is None:
        raise RuntimeError("forward must run immediately before backward")
    actions = cfg.resolved_actions()
    loss1, loss2 = losses(pred, labels, masks, binarized=masks._live)
    head_params = list(heads.parameters())
    if actions[epoch] == 0:
        loss = loss1
        params = head_params
        lrs = [cfg.head_lr or cfg.lr] * len(head_params)
    else:
        loss = loss1 + cfg.beta * loss2
        params = masks.params + head_params
        lrs = [cfg.mask_lr or cfg.lr] * len(masks.params) + \
              [cfg.head_lr or cfg.lr] * len(head_params)
    grads = torch.autograd.grad(loss, params)
    with torch.no_grad():
        for p, g, lr in zip(params, grads, lrs):
            if not torch.all(torch.isfinite(g)):
                raise RuntimeError(f"non-finite gradient at epoch {epoch} batch {batch_idx}")
            p -= lr * g
    masks._live = None
    return float(loss1.detach()), float(loss2.detach())


def _cm_valid_accuracy(tm: TrainedModel, heads: HeadSet, masks: MaskSet,
                       x: torch.Tensor, labels: np.ndarray, chunk: int = 256) -> float:
    correct = 0
    with torch.no_grad():
        mb = [(p > 0).to(p.dtype) for p in masks.params]
        for i in range(0, len(x), chunk):
            probs = _module_probs(tm, heads, masks, mb, x[i:i + chunk])
            correct += int((probs.argmax(dim=1).numpy() == labels[i:i + chunk]).sum())
    return correct / len(labels)


@dataclass
class GradSplitResult:
    masks: np.ndarray                 # (N, L) selected binarized masks
    head_states: list[dict]
    selected_epoch: int
    valid_acc: float
    retained_fraction: float
    log: list[dict] = field(default_factory=list)
    model_hash: str = ""

    def to_modules(self, tm: TrainedModel) -> list[composer.SlicedModule]:
        modules = []
        for class_id in range(len(self.masks)):
            head = composer._make_head(tm.spec.n_classes)
            head.load_state_dict(self.head_states[class_id])
            modules.append(composer.decode(tm, self.masks[class_id], head=head,
                                           class_id=class_id, provenance="grad"))
        return modules

    def save_bundles(self, tm: TrainedModel, out_dir: str) -> list[str]:
        paths = []
        for class_id, module in enumerate(self.to_modules(tm)):
            module.metrics = {"valid_acc": self.valid_acc,
                              "retained_fraction": float(self.masks[class_id].mean()),
                              "selected_epoch": self.selected_epoch}
            p = os.path.join(out_dir, f"class_{class_id:02d}")
            module.save(p)
            paths.append(p)
        return paths


def split(tm: TrainedModel, train: LabeledDataset, valid: LabeledDataset,
          cfg: GradConfig) -> GradSplitResult:
    """Train masks and heads for E epochs and return the best validation snapshot.

    TM weights stay frozen. After every epoch the binarized masks, head
    parameters, validation accuracy of the CM, and retained fraction are
    recorded; the snapshot with the highest accuracy wins, ties broken by
    fewest retained kernels.
    """
    if train.n_classes != tm.spec.n_classes:
        raise ValueError(
            f"class space mismatch: dataset has {train.n_classes} classes, "
            f"model expects {tm.spec.n_classes}"
        )
    n = tm.spec.n_classes
    frozen = tm.clone()
    for p in frozen.net.parameters():
        p.requires_grad_(False)
    frozen.net.eval()

    masks = MaskSet(frozen, n, seed=cfg.seed)
    heads = HeadSet(n, seed=cfg.seed)
    batch_size = cfg.batch_size
    if batch_size is None:
        batch_size = (tm.train_config or {}).get("batch_size", 32)

    x_train = frozen.normalize(train.images)
    y_train = torch.from_numpy(train.labels)
    x_valid = frozen.normalize(valid.images)
    rng = np.random.default_rng(cfg.seed)
    actions = cfg.resolved_actions()

    snapshots = []
    log = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        l1_sum = l2_sum = 0.0
        batches = 0
        for bi, start in enumerate(range(0, len(order), batch_size)):
            idx = torch.from_numpy(order[start:start + batch_size])
            pred = forward(masks, heads, frozen, x_train[idx])
            l1, l2 = backward(masks, heads, pred, y_train[idx], epoch, cfg, batch_idx=bi)
            l1_sum += l1
            l2_sum += l2
            batches += 1
        acc = _cm_valid_accuracy(frozen, heads, masks, x_valid, valid.labels)
        retained = masks.retained_fraction()
        snapshots.append((acc, retained, masks.binarized(), heads.state_dicts()))
        log.append({"epoch": epoch, "action": actions[epoch], "valid_acc": acc,
                    "retained_fraction": retained,
                    "loss1": l1_sum / batches, "loss2": l2_sum / batches})
        if epoch + 1 == 20 and max(s[0] for s in snapshots) <= 1.5 / n:
            raise RuntimeError("heads failed to train")

    best = max(range(len(snapshots)), key=lambda i: (snapshots[i][0], -snapshots[i][1]))
    acc, retained, bits, head_states = snapshots[best]
    return GradSplitResult(masks=bits, head_states=head_states, selected_epoch=best,
                           valid_acc=acc, retained_fraction=retained, log=log,
                           model_hash=tm.model_hash())
