"""Desk-scale training and ADMM pattern pruning on a synthetic dataset.

Training runs in torch on float32 CPU tensors. Models go in and come out as
:class:`~patconv.model.ModelGraph`; the torch network is a thin view of the
graph's layers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as tf

from .errors import TrainingError, ValidationError
from .filters import gaussian_filter
from .model import PRUNED, Conv, Linear, MaxPool, ModelGraph, PrunedConvLayer, ReLU, to_dense
from .pruning import PruneConfig, _prunable, magnitude_prune, pattern_set_for, prune_layer
from .tensor import ConvSpec, DenseConvLayer

__all__ = [
    "SyntheticDataset",
    "make_synthetic_dataset",
    "toy_cnn",
    "train_dense",
    "evaluate",
    "finetune_masked",
    "admm_prune",
    "prune_model",
    "constraint_distance",
]


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray

    @property
    def classes(self) -> int:
        return int(max(self.y_train.max(), self.y_val.max())) + 1

    @property
    def input_shape(self):
        return tuple(self.x_train.shape[1:])


def _smooth(img, kernel):
    # circular convolution through the FFT keeps prototypes tileable
    h, w = img.shape
    pad = np.zeros((h, w))
    kh, kw = kernel.shape
    pad[:kh, :kw] = kernel
    pad = np.roll(pad, (-(kh // 2), -(kw // 2)), axis=(0, 1))
    return np.real(np.fft.ifft2(np.fft.fft2(img) * np.fft.fft2(pad)))


def make_synthetic_dataset(n_train: int = 2000, n_val: int = 1000, *, classes: int = 10,
                           size: int = 16, noise: float = 1.2, max_shift: int = 2,
                           seed: int = 0) -> SyntheticDataset:
    """Seeded 10-class single-channel image set.

    Each class has a prototype made of smoothed white noise; a sample is its
    class prototype circularly shifted by up to ``max_shift`` pixels, scaled
    by a random gain in [0.8, 1.2] and corrupted with Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    kernel = gaussian_filter(5, 1.2).array()
    protos = []
    for _ in range(classes):
        p = _smooth(rng.standard_normal((size, size)), kernel)
        protos.append((p - p.mean()) / p.std())
    protos = np.stack(protos)

    def draw(n):
        y = rng.integers(0, classes, n)
        x = np.empty((n, 1, size, size), np.float32)
        for i, c in enumerate(y):
            dy, dx = rng.integers(-max_shift, max_shift + 1, 2)
            img = np.roll(protos[c], (dy, dx), axis=(0, 1)) * rng.uniform(0.8, 1.2)
            x[i, 0] = img + noise * rng.standard_normal((size, size))
        return x, y.astype(np.int64)

    x_tr, y_tr = draw(n_train)
    x_va, y_va = draw(n_val)
    return SyntheticDataset(x_tr, y_tr, x_va, y_va)


def toy_cnn(seed: int = 0, channels: Tuple[int, int] = (16, 32), classes: int = 10,
            size: int = 16) -> ModelGraph:
    """conv3x3(1->c1) relu pool, conv3x3(c1->c2) relu pool, linear -> classes."""
    rng = np.random.default_rng(seed)
    c1, c2 = channels
    spec = ConvSpec(3, 3, 1, 1)
    n_flat = c2 * (size // 4) ** 2
    fc = rng.standard_normal((classes, n_flat)) * math.sqrt(1.0 / n_flat)
    return ModelGraph((1, size, size), [
        Conv("conv1", DenseConvLayer.random(c1, 1, rng=rng, bias=True), spec),
        ReLU("relu1"), MaxPool("pool1"),
        Conv("conv2", DenseConvLayer.random(c2, c1, rng=rng, bias=True), spec),
        ReLU("relu2"), MaxPool("pool2"),
        Linear("fc", fc.astype(np.float32)),
    ])


class _TorchView:
    """Trainable float32 parameters for every conv and linear layer of a graph."""

    def __init__(self, model: ModelGraph):
        self.model = model
        self.params: Dict[str, Tuple[torch.Tensor, torch.Tensor]] = {}
        for node in model.layers:
            if isinstance(node, Conv):
                dense = to_dense(node.layer)
                w, b = dense.weights, dense.bias
            elif isinstance(node, Linear):
                w, b = node.weight, node.bias
            else:
                continue
            self.params[node.name] = (torch.tensor(np.array(w), requires_grad=True),
                                      torch.tensor(np.array(b), requires_grad=True))

    def parameters(self) -> List[torch.Tensor]:
        return [t for pair in self.params.values() for t in pair]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for node in self.model.layers:
            if isinstance(node, Conv):
                w, b = self.params[node.name]
                x = tf.conv2d(x, w, b, stride=node.spec.stride, padding=node.spec.padding)
            elif isinstance(node, ReLU):
                x = torch.relu(x)
            elif isinstance(node, MaxPool):
                x = tf.max_pool2d(x, node.size, node.stride)
            elif isinstance(node, Linear):
                w, b = self.params[node.name]
                x = tf.linear(x.flatten(1), w, b)
        return x

    def weight(self, name) -> np.ndarray:
        return self.params[name][0].detach().numpy().copy()

    def to_model(self, pruned: Optional[Dict[str, PrunedConvLayer]] = None) -> ModelGraph:
        """Graph with the current weights; layers in ``pruned`` are rebuilt on their ids."""
        pruned = pruned or {}
        nodes = []
        for node in self.model.layers:
            if isinstance(node, (Conv, Linear)):
                w, b = (t.detach().numpy().copy() for t in self.params[node.name])
            if isinstance(node, Conv):
                if node.name in pruned:
                    off = constraint_distance(w, pruned[node.name])
                    if off != 0.0:
                        raise TrainingError(f"{node.name}: weights left the constraint set "
                                            f"(max off-mask magnitude {off})", {"layer": node.name})
                    nodes.append(Conv(node.name, _gather(pruned[node.name], w, b), node.spec))
                else:
                    nodes.append(Conv(node.name, DenseConvLayer(w, b), node.spec))
            elif isinstance(node, Linear):
                nodes.append(Linear(node.name, w, b))
            else:
                nodes.append(node)
        return ModelGraph(self.model.input_shape, nodes)


def _gather(template: PrunedConvLayer, dense_w: np.ndarray, bias: np.ndarray) -> PrunedConvLayer:
    """Read the weights at ``template``'s mask positions out of a dense F x C x 3 x 3 array."""
    ids = template.pattern_ids.ravel()
    keep = np.flatnonzero(ids != PRUNED)
    pos = template.pattern_set.positions()[ids[keep]]
    flat = dense_w.reshape(ids.size, 9)
    compact = flat[np.repeat(keep, template.nnz), pos.ravel()]
    return PrunedConvLayer(template.pattern_set, template.pattern_ids, compact, bias,
                           template.balanced)


def _mask(layer: PrunedConvLayer) -> torch.Tensor:
    return torch.tensor(to_dense(PrunedConvLayer(
        layer.pattern_set, layer.pattern_ids, np.ones_like(layer.compact_weights),
        None, layer.balanced)).weights)


def _batches(n, batch_size, gen):
    order = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _val_metrics(view: _TorchView, data: SyntheticDataset) -> Tuple[float, float]:
    with torch.no_grad():
        logits = view.forward(torch.from_numpy(data.x_val))
        y = torch.from_numpy(data.y_val)
        loss = float(tf.cross_entropy(logits, y))
        acc = float((logits.argmax(1) == y).float().mean())
    return loss, acc


def _train(view: _TorchView, data: SyntheticDataset, *, epochs: int, lr: float, momentum: float,
           batch_size: int, seed: int, penalty=None, masks=None, stage: str = "train",
           diagnostics: Optional[dict] = None) -> None:
    """SGD with momentum and a cosine-decayed learning rate.

    ``penalty()`` is added to the loss; after every step, weights named in
    ``masks`` are multiplied by their mask so pruned entries stay zero.
    """
    if epochs == 0:
        return
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.SGD(view.parameters(), lr=lr, momentum=momentum)
    steps = epochs * math.ceil(len(data.y_train) / batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    x_all = torch.from_numpy(data.x_train)
    y_all = torch.from_numpy(data.y_train)
    for epoch in range(epochs):
        total = 0.0
        for idx in _batches(len(y_all), batch_size, gen):
            loss = tf.cross_entropy(view.forward(x_all[idx]), y_all[idx])
            if penalty is not None:
                loss = loss + penalty()
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            if masks:
                with torch.no_grad():
                    for name, m in masks.items():
                        view.params[name][0].mul_(m)
            total += loss.item() * len(idx)
        val_loss, val_acc = _val_metrics(view, data)
        if not (math.isfinite(val_loss) and math.isfinite(total)):
            diag = dict(diagnostics or {})
            diag.update(stage=stage, epoch=epoch, train_loss=total / len(y_all),
                        val_loss=val_loss, lr=lr)
            raise TrainingError(f"training diverged during {stage} epoch {epoch}: "
                                f"validation loss {val_loss}", diag)


def train_dense(model: ModelGraph, data: SyntheticDataset, *, epochs: int = 8, lr: float = 0.05,
                momentum: float = 0.9, batch_size: int = 64, seed: int = 0) -> ModelGraph:
    """Train every layer of ``model`` (pruned conv layers are densified)."""
    torch.manual_seed(seed)
    view = _TorchView(model)
    _train(view, data, epochs=epochs, lr=lr, momentum=momentum, batch_size=batch_size,
           seed=seed, stage="dense")
    return view.to_model()


def evaluate(model: ModelGraph, data: SyntheticDataset) -> float:
    """Validation accuracy in [0, 1]."""
    return _val_metrics(_TorchView(model), data)[1]


def finetune_masked(model: ModelGraph, data: SyntheticDataset, config: PruneConfig) -> ModelGraph:
    """Retrain a pruned model with its masks frozen (pruned entries stay exactly zero)."""
    view = _TorchView(model)
    pruned = {n.name: n.layer for n in model.convs() if isinstance(n.layer, PrunedConvLayer)}
    masks = {name: _mask(layer) for name, layer in pruned.items()}
    _train(view, data, epochs=config.finetune_epochs, lr=config.lr, momentum=config.momentum,
           batch_size=config.batch_size, seed=config.seed + 1, masks=masks, stage="finetune")
    return view.to_model(pruned)


def _project(w: np.ndarray, bias: np.ndarray, pset, keep, balanced) -> PrunedConvLayer:
    return prune_layer(DenseConvLayer(w, bias), pset, keep, balanced)


def admm_prune(model: ModelGraph, data: SyntheticDataset, config: PruneConfig) -> ModelGraph:
    """ADMM pattern + connectivity pruning, then hard projection and masked fine-tuning.

    Each round trains on task loss plus ``rho/2 * ||W - Z + U||^2`` per pruned
    layer, then sets ``Z = proj(W + U)`` and ``U += W - Z``. With ``rounds=0``
    this is exactly projection followed by :func:`finetune_masked`.
    """
    pset = pattern_set_for(config)
    targets = [n for n in model.convs() if _prunable(n, config)]
    if not targets:
        raise ValidationError("no prunable 3x3 conv layers in the model")
    torch.manual_seed(config.seed)
    view = _TorchView(model)
    names = [n.name for n in targets]
    keep = {n: config.keep_for(n) for n in names}

    def proj_dense(name, w):
        if not np.isfinite(w).all():
            raise TrainingError(f"non-finite weights in {name} before projection",
                                {"layer": name, "rho": config.rho})
        bias = np.zeros(w.shape[0], np.float32)
        return to_dense(_project(w, bias, pset, keep[name], config.balanced)).weights

    z = {n: torch.tensor(proj_dense(n, view.weight(n))) for n in names}
    u = {n: torch.zeros_like(z[n]) for n in names}
    rho = float(config.rho)

    def penalty():
        return sum(0.5 * rho * torch.sum((view.params[n][0] - z[n] + u[n]) ** 2) for n in names)

    for r in range(config.rounds):
        _train(view, data, epochs=config.epochs_per_round, lr=config.lr,
               momentum=config.momentum, batch_size=config.batch_size,
               seed=config.seed + 100 + r, penalty=penalty if rho > 0 else None,
               stage="admm", diagnostics={"round": r, "rho": rho})
        for n in names:
            w = view.weight(n)
            z[n] = torch.tensor(proj_dense(n, w + u[n].numpy()))
            u[n] = u[n] + torch.from_numpy(w) - z[n]

    hard = {}
    for node in targets:
        w = view.weight(node.name)
        b = view.params[node.name][1].detach().numpy().copy()
        if not np.isfinite(w).all():
            raise TrainingError(f"non-finite weights in {node.name} before hard projection",
                                {"layer": node.name, "rho": rho})
        hard[node.name] = _project(w, b, pset, keep[node.name], config.balanced)
        with torch.no_grad():
            view.params[node.name][0].copy_(torch.tensor(to_dense(hard[node.name]).weights))
    return finetune_masked(view.to_model(hard), data, config)


def prune_model(model: ModelGraph, config: PruneConfig,
                data: Optional[SyntheticDataset] = None) -> ModelGraph:
    """Dispatch on ``config.method``.

    ``magnitude`` projects once and, when data is given, fine-tunes with masks
    frozen. ``admm`` requires data.
    """
    if config.method == "magnitude":
        pruned = magnitude_prune(model, config)
        return pruned if data is None else finetune_masked(pruned, data, config)
    if data is None:
        raise ValidationError("ADMM pruning needs a training dataset")
    return admm_prune(model, data, config)


def constraint_distance(weights, layer: PrunedConvLayer) -> float:
    """Largest |w| of a dense F x C x 3 x 3 array outside ``layer``'s masks (0 on the set)."""
    dense = np.asarray(weights, np.float32).reshape(layer.filters, layer.channels, 9)
    ids = layer.pattern_ids
    mask = np.zeros(dense.shape, bool)
    keep = ids != PRUNED
    mask[keep] = layer.pattern_set.matrix()[ids[keep]].astype(bool)
    return float(np.abs(dense[~mask]).max(initial=0.0))
