"""CNN structural families (plain / residual / branched), training, and FLOPs accounting."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import LabeledDataset
from .errors import SpecValidationError

MODEL_FORMAT = "modsplit-model/1"


@dataclass(frozen=True)
class ConvSpec:
    out_kernels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class ArchitectureSpec:
    """Structural description of a plain / residual / branched CNN.

    conv_layers run in index order; members of a branch group all read the
    same input and their outputs are concatenated; a residual pair (a, b)
    adds layer a's output onto layer b's conv output before activation;
    pool_points name layers followed by 2x2 max pooling. fc_layers lists
    every fully connected width including the final n_classes output.
    """

    conv_layers: tuple[ConvSpec, ...]
    fc_layers: tuple[int, ...]
    n_classes: int
    image_side: int = 32
    image_channels: int = 3
    pool_points: tuple[int, ...] = ()
    residual_pairs: tuple[tuple[int, int], ...] = ()
    branch_groups: tuple[tuple[int, ...], ...] = ()

    @property
    def total_kernels(self) -> int:
        return sum(c.out_kernels for c in self.conv_layers)

    def kernel_slice(self, layer: int) -> slice:
        """Slice of the flat per-kernel vector covering `layer`."""
        start = sum(c.out_kernels for c in self.conv_layers[:layer])
        return slice(start, start + self.conv_layers[layer].out_kernels)

    def tied_layer_groups(self) -> list[list[int]]:
        """Connected components of layers tied by residual pairs, ascending."""
        parent = list(range(len(self.conv_layers)))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for a, b in self.residual_pairs:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
        groups: dict[int, list[int]] = {}
        for l in range(len(self.conv_layers)):
            groups.setdefault(find(l), []).append(l)
        return [sorted(g) for _, g in sorted(groups.items())]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ArchitectureSpec":
        d = json.loads(text)
        d["conv_layers"] = tuple(ConvSpec(**c) for c in d["conv_layers"])
        d["fc_layers"] = tuple(d["fc_layers"])
        d["pool_points"] = tuple(d["pool_points"])
        d["residual_pairs"] = tuple(tuple(p) for p in d["residual_pairs"])
        d["branch_groups"] = tuple(tuple(g) for g in d["branch_groups"])
        return ArchitectureSpec(**d)


@dataclass
class LayerGraph:
    """Resolved wiring: per-layer input sources and spatial dims."""

    sources: list[list[int]]      # per layer: source conv layer ids, -1 = image
    out_side: list[int]           # spatial side of each layer's final output (post pool)
    conv_side: list[int]          # spatial side of each layer's conv output (pre pool)
    sink_layers: list[int]        # layers whose concatenated output feeds the FC stack
    flatten_side: int


def _conv_out_side(side: int, cs: ConvSpec) -> int:
    return (side + 2 * cs.padding - cs.kernel_size) // cs.stride + 1


def resolve_graph(spec: ArchitectureSpec) -> LayerGraph:
    """Derive dataflow and spatial dims from the spec; validates structure."""
    n = len(spec.conv_layers)
    if n == 0:
        raise SpecValidationError("at least one conv layer required")
    if not spec.fc_layers or spec.fc_layers[-1] != spec.n_classes:
        raise SpecValidationError("fc_layers must end with n_classes")
    group_of: dict[int, tuple[int, ...]] = {}
    for g in spec.branch_groups:
        g = tuple(sorted(g))
        if list(g) != list(range(g[0], g[-1] + 1)):
            raise SpecValidationError(f"branch group {g} must cover contiguous layer indices")
        for m in g:
            if m in group_of:
                raise SpecValidationError(f"layer {m} appears in two branch groups")
            if m >= n:
                raise SpecValidationError(f"branch group member {m} does not exist")
            group_of[m] = g

    sources: list[list[int]] = [[] for _ in range(n)]
    out_side = [0] * n
    conv_side = [0] * n
    prev_out: list[int] = [-1]       # ids forming the current chain output, -1 = image
    prev_side = spec.image_side
    l = 0
    while l < n:
        if l in group_of:
            g = group_of[l]
            member_sides = []
            for m in g:
                sources[m] = list(prev_out)
                conv_side[m] = _conv_out_side(prev_side, spec.conv_layers[m])
                out_side[m] = conv_side[m] // 2 if m in spec.pool_points else conv_side[m]
                member_sides.append(out_side[m])
            if len(set(member_sides)) != 1:
                raise SpecValidationError(f"branch group {g} members disagree on output size")
            prev_out = list(g)
            prev_side = member_sides[0]
            l = g[-1] + 1
        else:
            sources[l] = list(prev_out)
            conv_side[l] = _conv_out_side(prev_side, spec.conv_layers[l])
            out_side[l] = conv_side[l] // 2 if l in spec.pool_points else conv_side[l]
            prev_out = [l]
            prev_side = out_side[l]
            l += 1

    for a, b in spec.residual_pairs:
        if not (0 <= a < n and 0 <= b < n and a < b):
            raise SpecValidationError(f"residual pair ({a}, {b}) is out of range or unordered")
        if spec.conv_layers[a].out_kernels != spec.conv_layers[b].out_kernels:
            raise SpecValidationError(
                f"residual pair ({a}, {b}) kernel counts differ: "
                f"{spec.conv_layers[a].out_kernels} vs {spec.conv_layers[b].out_kernels}"
            )
        if out_side[a] != conv_side[b]:
            raise SpecValidationError(
                f"residual pair ({a}, {b}) spatial dims differ: "
                f"{out_side[a]} vs {conv_side[b]}"
            )
    if prev_side < 1:
        raise SpecValidationError("spatial size collapsed below 1; too much pooling")
    return LayerGraph(
        sources=sources,
        out_side=out_side,
        conv_side=conv_side,
        sink_layers=list(prev_out),
        flatten_side=prev_side,
    )


def input_channel_sources(spec: ArchitectureSpec, graph: LayerGraph, layer: int) -> list[tuple[int, int]]:
    """Input channels of `layer` as (source_layer, kernel_in_source); source -1 = image."""
    chans: list[tuple[int, int]] = []
    for s in graph.sources[layer]:
        width = spec.image_channels if s == -1 else spec.conv_layers[s].out_kernels
        chans.extend((s, k) for k in range(width))
    return chans


class CnnModel(nn.Module):
    """Executable network for an ArchitectureSpec.

    forward() optionally multiplies each conv layer's output channels by a
    per-layer scale (broadcast over batch and positions), which implements
    masked kernel removal without touching the weights.
    """

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.spec = spec
        self.graph = resolve_graph(spec)
        convs = []
        for l, cs in enumerate(spec.conv_layers):
            in_ch = len(input_channel_sources(spec, self.graph, l))
            convs.append(nn.Conv2d(in_ch, cs.out_kernels, cs.kernel_size,
                                   stride=cs.stride, padding=cs.padding))
        self.convs = nn.ModuleList(convs)
        flat = sum(spec.conv_layers[s].out_kernels for s in self.graph.sink_layers)
        flat *= self.graph.flatten_side ** 2
        fcs = []
        prev = flat
        for w in spec.fc_layers:
            fcs.append(nn.Linear(prev, w))
            prev = w
        self.fcs = nn.ModuleList(fcs)
        self._add_into: dict[int, list[int]] = {}
        for a, b in spec.residual_pairs:
            self._add_into.setdefault(b, []).append(a)

    def forward(self, x: torch.Tensor, channel_scales=None,
                conv_outputs: list | None = None) -> torch.Tensor:
        outs: dict[int, torch.Tensor] = {-1: x}
        for l, conv in enumerate(self.convs):
            src = self.graph.sources[l]
            inp = outs[src[0]] if len(src) == 1 else torch.cat([outs[s] for s in src], dim=1)
            y = conv(inp)
            if conv_outputs is not None:
                conv_outputs.append(y)
            if channel_scales is not None and channel_scales[l] is not None:
                y = y * channel_scales[l]
            for a in self._add_into.get(l, ()):
                y = y + outs[a]
            y = F.relu(y)
            if l in self.spec.pool_points:
                y = F.max_pool2d(y, 2)
            outs[l] = y
        sink = self.graph.sink_layers
        feat = outs[sink[0]] if len(sink) == 1 else torch.cat([outs[s] for s in sink], dim=1)
        z = feat.flatten(1)
        for i, fc in enumerate(self.fcs):
            z = fc(z)
            if i < len(self.fcs) - 1:
                z = F.relu(z)
        return z

    def conv_feature_sums(self, x: torch.Tensor) -> torch.Tensor:
        """Per-kernel sums of pre-activation conv outputs, concatenated: (B, L)."""
        captured: list[torch.Tensor] = []
        self.forward(x, conv_outputs=captured)
        return torch.cat([c.sum(dim=(2, 3)) for c in captured], dim=1)


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 32
    lr: float = 0.05
    lr_decay_epochs: tuple[int, ...] = ()
    lr_decay_factor: float = 0.1
    weight_decay: float = 1e-4
    momentum: float = 0.9
    nesterov: bool = True
    augment: bool = False
    seed: int = 0
    clip_grad_norm: float | None = None   # no-BatchNorm stacks spike on small data


class TrainedModel:
    """An ArchitectureSpec plus learned parameters and input normalization stats."""

    def __init__(self, spec: ArchitectureSpec, net: CnnModel,
                 norm_mean=None, norm_std=None,
                 train_config: dict | None = None, metrics: dict | None = None):
        self.spec = spec
        self.net = net
        c = spec.image_channels
        self.norm_mean = np.zeros(c) if norm_mean is None else np.asarray(norm_mean, dtype=np.float64)
        self.norm_std = np.ones(c) if norm_std is None else np.asarray(norm_std, dtype=np.float64)
        self.train_config = train_config
        self.metrics = metrics or {}

    def normalize(self, images: np.ndarray) -> torch.Tensor:
        """uint8 (B, H, W, C) -> normalized float32 (B, C, H, W) tensor."""
        x = images.astype(np.float32) / 255.0
        x = (x - self.norm_mean.astype(np.float32)) / self.norm_std.astype(np.float32)
        return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))

    def predict(self, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Logits for a uint8 image batch: (B, n_classes) float32."""
        if images.ndim != 4 or images.shape[1] != self.spec.image_side \
                or images.shape[3] != self.spec.image_channels:
            raise ValueError(
                f"expected images (B, {self.spec.image_side}, {self.spec.image_side}, "
                f"{self.spec.image_channels}), got {images.shape}"
            )
        outs = []
        self.net.eval()
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                outs.append(self.net(self.normalize(images[i:i + batch_size])).numpy())
        return np.concatenate(outs) if outs else np.empty((0, self.spec.n_classes), np.float32)

    def clone(self) -> "TrainedModel":
        net = CnnModel(self.spec)
        net.load_state_dict(copy.deepcopy(self.net.state_dict()))
        return TrainedModel(self.spec, net, self.norm_mean.copy(), self.norm_std.copy(),
                            copy.deepcopy(self.train_config), dict(self.metrics))

    def model_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.spec.to_json().encode())
        for k, v in sorted(self.net.state_dict().items()):
            h.update(k.encode())
            h.update(v.numpy().tobytes())
        h.update(self.norm_mean.tobytes())
        h.update(self.norm_std.tobytes())
        return h.hexdigest()

    def save(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "spec.json"), "w") as f:
            f.write(self.spec.to_json())
        arrays = {k: v.numpy() for k, v in self.net.state_dict().items()}
        arrays["__norm_mean"] = self.norm_mean
        arrays["__norm_std"] = self.norm_std
        np.savez(os.path.join(out_dir, "params.npz"), **arrays)
        with open(os.path.join(out_dir, "metrics.json"), "w") as f:
            json.dump({"format": MODEL_FORMAT, "metrics": self.metrics,
                       "train_config": self.train_config,
                       "hash": self.model_hash()}, f, indent=2)

    @staticmethod
    def load(path: str) -> "TrainedModel":
        with open(os.path.join(path, "spec.json")) as f:
            spec = ArchitectureSpec.from_json(f.read())
        blob = np.load(os.path.join(path, "params.npz"))
        norm_mean = blob["__norm_mean"]
        norm_std = blob["__norm_std"]
        state = {k: torch.from_numpy(blob[k]) for k in blob.files if not k.startswith("__")}
        net = CnnModel(spec)
        net.load_state_dict(state)
        with open(os.path.join(path, "metrics.json")) as f:
            info = json.load(f)
        if info.get("format") != MODEL_FORMAT:
            raise ValueError(f"unsupported model format {info.get('format')!r}")
        return TrainedModel(spec, net, norm_mean, norm_std,
                            info.get("train_config"), info.get("metrics", {}))


def build_model(spec: ArchitectureSpec, seed: int) -> TrainedModel:
    """Validate a spec and initialize parameters deterministically from seed."""
    resolve_graph(spec)
    torch.manual_seed(seed)
    net = CnnModel(spec)
    probe = torch.zeros(2, spec.image_channels, spec.image_side, spec.image_side)
    with torch.no_grad():
        out = net(probe)
    if out.shape != (2, spec.n_classes):
        raise SpecValidationError(f"probe forward produced {tuple(out.shape)}")
    return TrainedModel(spec, net)


def _augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random crop with 4px reflect padding plus horizontal flip, on uint8."""
    b, h, w, c = images.shape
    padded = np.pad(images, ((0, 0), (4, 4), (4, 4), (0, 0)), mode="reflect")
    out = np.empty_like(images)
    ys = rng.integers(0, 9, size=b)
    xs = rng.integers(0, 9, size=b)
    flips = rng.random(b) < 0.5
    for i in range(b):
        crop = padded[i, ys[i]:ys[i] + h, xs[i]:xs[i] + w]
        out[i] = crop[:, ::-1] if flips[i] else crop
    return out


def evaluate(model: TrainedModel, dataset: LabeledDataset) -> float:
    """Top-1 accuracy of the model on a dataset."""
    logits = model.predict(dataset.images)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def train(model: TrainedModel, train_ds: LabeledDataset, valid_ds: LabeledDataset,
          config: TrainConfig) -> TrainedModel:
    """SGD training with best-validation checkpointing; returns an updated copy."""
    if train_ds.n_classes != model.spec.n_classes:
        raise ValueError(
            f"class space mismatch: dataset has {train_ds.n_classes} classes, "
            f"model expects {model.spec.n_classes}"
        )
    if train_ds.images.shape[1] != model.spec.image_side:
        raise ValueError(
            f"image size mismatch: dataset is {train_ds.images.shape[1]}px, "
            f"model expects {model.spec.image_side}px"
        )
    out = model.clone()
    if config.epochs == 0:
        return out
    x8 = train_ds.images
    flat = x8.reshape(-1, x8.shape[3]).astype(np.float64) / 255.0
    out.norm_mean = flat.mean(axis=0)
    out.norm_std = np.maximum(flat.std(axis=0), 1e-6)
    out.train_config = asdict(config)

    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    net = out.net
    opt = torch.optim.SGD(net.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay, nesterov=config.nesterov)
    labels_all = torch.from_numpy(train_ds.labels)
    best_acc, best_state = -1.0, None
    history = []
    for epoch in range(config.epochs):
        lr = config.lr * (config.lr_decay_factor ** sum(epoch >= m for m in config.lr_decay_epochs))
        for g in opt.param_groups:
            g["lr"] = lr
        order = rng.permutation(len(train_ds))
        net.train()
        correct = 0
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            imgs = train_ds.images[idx]
            if config.augment:
                imgs = _augment_batch(imgs, rng)
            xb = out.normalize(imgs)
            yb = labels_all[idx]
            opt.zero_grad()
            logits = net(xb)
            loss = F.cross_entropy(logits, yb)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite loss at epoch {epoch} batch {bi}")
            loss.backward()
            if config.clip_grad_norm is not None:
                torch.nn.utils.clip_grad_norm_(net.parameters(), config.clip_grad_norm)
            opt.step()
            correct += int((logits.argmax(dim=1) == yb).sum())
        train_acc = correct / len(order)
        valid_acc = evaluate(out, valid_ds)
        history.append({"epoch": epoch, "train_acc": train_acc, "valid_acc": valid_acc, "lr": lr})
        # keep the latest checkpoint among ties: equally accurate but better trained
        if valid_acc >= best_acc:
            best_acc = valid_acc
            best_state = copy.deepcopy(net.state_dict())
    net.load_state_dict(best_state)
    out.metrics = {"train_acc": history[-1]["train_acc"], "valid_acc": best_acc,
                   "epochs": config.epochs, "history": history}
    return out


@dataclass(frozen=True)
class FlopsReport:
    per_layer: tuple[tuple[str, int], ...]
    total: int
    convention: str

    @property
    def conv_total(self) -> int:
        return sum(v for k, v in self.per_layer if k.startswith("conv"))


def count_flops(spec: ArchitectureSpec, mul_add_factor: int = 1) -> FlopsReport:
    """Per-layer FLOPs.

    One multiply-accumulate counts as `mul_add_factor` operations (default 1,
    which is the convention the reference table values follow; pass 2 to count
    the multiply and the add separately). Bias adds are included for FC
    layers and excluded for conv layers; pooling and activations are ignored.
    """
    graph = resolve_graph(spec)
    rows = []
    for l, cs in enumerate(spec.conv_layers):
        c_in = len(input_channel_sources(spec, graph, l))
        side = graph.conv_side[l]
        flops = mul_add_factor * cs.kernel_size ** 2 * c_in * side * side * cs.out_kernels
        rows.append((f"conv{l}", int(flops)))
    prev = sum(spec.conv_layers[s].out_kernels for s in graph.sink_layers) * graph.flatten_side ** 2
    for i, w in enumerate(spec.fc_layers):
        rows.append((f"fc{i}", int(mul_add_factor * prev * w + w)))
        prev = w
    total = sum(v for _, v in rows)
    conv = ("multiply-accumulate = 1 op" if mul_add_factor == 1
            else f"multiply-accumulate = {mul_add_factor} ops")
    return FlopsReport(per_layer=tuple(rows), total=total,
                       convention=f"{conv}; conv bias excluded, fc bias included")


# ---------------------------------------------------------------------------
# Presets. Desk-scale specs keep each family's structural hazard (sequential,
# additive, concatenative) while training in seconds; full-scale presets match
# the reference kernel totals (4224 / 4288 / 3200).

def desk_plain(n_classes: int = 4, image_side: int = 16) -> ArchitectureSpec:
    return ArchitectureSpec(
        conv_layers=tuple(ConvSpec(k) for k in (16, 16, 32, 32, 64, 64)),
        fc_layers=(64, n_classes),
        n_classes=n_classes,
        image_side=image_side,
        pool_points=(1, 3, 5),
    )


def desk_residual(n_classes: int = 4, image_side: int = 16) -> ArchitectureSpec:
    return ArchitectureSpec(
        conv_layers=tuple(ConvSpec(k) for k in (16, 16, 16, 16, 32, 32)),
        fc_layers=(n_classes,),
        n_classes=n_classes,
        image_side=image_side,
        pool_points=(3, 5),
        residual_pairs=((0, 2), (1, 3), (4, 5)),
    )


def desk_branched(n_classes: int = 4, image_side: int = 16) -> ArchitectureSpec:
    return ArchitectureSpec(
        conv_layers=tuple(ConvSpec(k) for k in (16, 16, 16, 32, 32, 64)),
        fc_layers=(n_classes,),
        n_classes=n_classes,
        image_side=image_side,
        pool_points=(0, 1, 2, 3, 4),
        branch_groups=((1, 2), (3, 4)),
    )


def desk_weak(n_classes: int = 4, image_side: int = 16) -> ArchitectureSpec:
    """Overly simple 2-conv model used as the patching target."""
    return ArchitectureSpec(
        conv_layers=(ConvSpec(8), ConvSpec(8)),
        fc_layers=(n_classes,),
        n_classes=n_classes,
        image_side=image_side,
        pool_points=(0, 1),
    )


def paper_simcnn(n_classes: int = 10) -> ArchitectureSpec:
    widths = (64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512)
    return ArchitectureSpec(
        conv_layers=tuple(ConvSpec(k) for k in widths),
        fc_layers=(512, 512, n_classes),
        n_classes=n_classes,
        image_side=32,
        pool_points=(1, 3, 6, 9, 12),
    )


def paper_rescnn(n_classes: int = 10) -> ArchitectureSpec:
    widths = (96, 96, 192, 192, 384, 384, 384, 384, 512, 512, 512, 640)
    return ArchitectureSpec(
        conv_layers=tuple(ConvSpec(k) for k in widths),
        fc_layers=(n_classes,),
        n_classes=n_classes,
        image_side=32,
        pool_points=(1, 3, 7, 11),
        residual_pairs=((4, 6), (5, 7), (8, 10)),
    )


def paper_incecnn(n_classes: int = 10) -> ArchitectureSpec:
    widths = (128, 256, 128, 128, 256, 256, 256, 256, 256, 256, 512, 512)
    return ArchitectureSpec(
        conv_layers=tuple(ConvSpec(k, kernel_size=5, padding=2) for k in widths),
        fc_layers=(n_classes,),
        n_classes=n_classes,
        image_side=32,
        pool_points=(0, 1, 4, 7, 10),
        branch_groups=((2, 3), (5, 6), (8, 9)),
    )


ARCH_PRESETS = {
    ("plain", "desk"): desk_plain,
    ("res", "desk"): desk_residual,
    ("ince", "desk"): desk_branched,
    ("plain", "paper"): paper_simcnn,
    ("res", "paper"): paper_rescnn,
    ("ince", "paper"): paper_incecnn,
}
