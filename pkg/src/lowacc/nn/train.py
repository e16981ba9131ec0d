"""Float and quantization-aware training of the preset networks.

Two schedules are supported:

* ``ptoq``: real-valued SGD while the N:M schedule prunes on ``|w|``; the
  last ``qat_epochs`` epochs switch on fake quantization with masks frozen.
* ``qtop``: fake quantization from the first epoch, and the same schedule
  ranks weights by the magnitude of their *quantized* codes.

Fake quantization uses the straight-through estimator: the backward pass
treats quantize-dequantize as the identity. Training always uses exact
(float) accumulation.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from ..quant import fake_quantize, observe, quantize
from ..sparsity import PruneSchedule, schedule_step
from .layers import col2im, conv_output_size, im2col
from .model import Model

log = logging.getLogger(__name__)

SCHEDULES = ("ptoq", "qtop")


@dataclass(frozen=True)
class TrainConfig:
    schedule: str = "ptoq"
    epochs: int = 10
    qat_epochs: int = 2
    prune: PruneSchedule | None = None
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    lr_schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if not 0 <= self.qat_epochs <= self.epochs:
            raise ValueError("qat_epochs must lie in [0, epochs]")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")

    def qat_active(self, epoch: int) -> bool:
        return self.schedule == "qtop" or epoch >= self.epochs - self.qat_epochs

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant" or self.epochs <= 1:
            return self.lr
        return 0.5 * self.lr * (1.0 + np.cos(np.pi * epoch / self.epochs))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prune"] = asdict(self.prune) if self.prune else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("prune"):
            d["prune"] = PruneSchedule(**d["prune"])
        return cls(**d)


def _softmax_xent(logits: np.ndarray, labels: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    prob = e / e.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = -np.log(prob[np.arange(n), labels] + 1e-12).mean()
    grad = prob
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


class _Net:
    """Forward/backward over a :class:`Model` with optional fake quantization."""

    def __init__(self, model: Model):
        self.model = model
        self.specs = model.specs

    def _act(self, h, j, qat, calibrate):
        m = self.model
        if calibrate:
            m.act_stats[j] = observe(m.act_stats[j], h)
        if qat:
            h = fake_quantize(h, m.act_params(j)).astype(np.float32)
        return h

    def _weight(self, j, qat):
        w = self.model.masked_weight(j)
        if qat:
            w = fake_quantize(w, self.model.weight_params(j)).astype(np.float32)
        return w

    def forward(self, x, qat=False, calibrate=True):
        caches = []
        h = self._act(x, 0, qat, calibrate)
        j = 0
        for spec in self.specs:
            if spec.kind == "relu":
                mask = h > 0
                h = h * mask
                caches.append(mask)
            elif spec.kind == "flatten":
                caches.append(h.shape)
                h = h.reshape(h.shape[0], -1)
            else:
                if j > 0:
                    h = self._act(h, j, qat, calibrate)
                w = self._weight(j, qat)
                if spec.kind == "linear":
                    caches.append((h, w))
                    h = h @ w.T
                else:
                    n, _, hh, ww = h.shape
                    ho = conv_output_size(hh, spec.kernel, spec.stride, spec.padding)
                    wo = conv_output_size(ww, spec.kernel, spec.stride, spec.padding)
                    cols = im2col(h, spec.kernel, spec.stride, spec.padding)
                    wf = w.reshape(spec.out_features, -1)
                    caches.append((cols, wf, h.shape))
                    h = (cols.reshape(-1, cols.shape[-1]) @ wf.T).reshape(n, ho, wo, -1)
                    h = h.transpose(0, 3, 1, 2)
                j += 1
        h = self._act(h, j, qat, calibrate)
        return h, caches

    def backward(self, grad, caches):
        grads = [None] * len(self.model.weights)
        j = len(self.model.weights)
        for spec, cache in zip(reversed(self.specs), reversed(caches)):
            if spec.kind == "relu":
                grad = grad * cache
            elif spec.kind == "flatten":
                grad = grad.reshape(cache)
            elif spec.kind == "linear":
                j -= 1
                h, w = cache
                grads[j] = grad.T @ h
                grad = grad @ w
            else:
                j -= 1
                cols, wf, x_shape = cache
                g = grad.transpose(0, 2, 3, 1)
                g2 = g.reshape(-1, g.shape[-1])
                grads[j] = (g2.T @ cols.reshape(-1, cols.shape[-1])).reshape(spec.weight_shape)
                dcols = (g2 @ wf).reshape(*g.shape[:3], -1)
                grad = col2im(dcols, x_shape, spec.kernel, spec.stride, spec.padding)
        return grads


def _prune_step(model: Model, cfg: TrainConfig, epoch: int) -> bool:
    changed = False
    for j, spec in enumerate(model.weight_specs):
        if not spec.prunable:
            continue
        magnitude = None
        if cfg.schedule == "qtop":
            magnitude = quantize(model.masked_weight(j), model.weight_params(j)).values
        new = schedule_step(cfg.prune, epoch, model.weights[j], model.patterns[j], magnitude)
        if new is not model.patterns[j]:
            model.patterns[j] = new
            changed = True
    return changed


def train(model: Model, images, labels, cfg: TrainConfig, eval_set=None) -> Model:
    """Train ``model`` in place and return it.

    The per-epoch history (loss, train accuracy, sparsity, QAT flag and,
    when ``eval_set`` is given, integer-inference test accuracy after the
    last epoch) is stored in ``model.meta["history"]``.
    """
    from .model import evaluate

    rng = np.random.default_rng(cfg.seed)
    x = np.asarray(images, dtype=np.float32).reshape(len(labels), *model.input_shape)
    y = np.asarray(labels, dtype=np.int64)
    net = _Net(model)
    velocity = [np.zeros_like(w) for w in model.weights]
    history = []

    for epoch in range(cfg.epochs):
        if cfg.prune is not None and _prune_step(model, cfg, epoch):
            for j, pat in enumerate(model.patterns):
                model.weights[j] = (model.weights[j] * pat.mask).astype(np.float32)
                velocity[j] *= pat.mask
        qat = cfg.qat_active(epoch)
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(y))
        losses, correct = [], 0
        for s in range(0, len(y), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            logits, caches = net.forward(x[idx], qat=qat)
            loss, grad = _softmax_xent(logits.astype(np.float64), y[idx])
            losses.append(loss * len(idx))
            correct += int((logits.argmax(axis=1) == y[idx]).sum())
            grads = net.backward(grad.astype(np.float32), caches)
            for j, g in enumerate(grads):
                mask = model.patterns[j].mask
                g = g * mask + cfg.weight_decay * model.weights[j]
                velocity[j] = (cfg.momentum * velocity[j] + g) * mask
                model.weights[j] = ((model.weights[j] - lr * velocity[j]) * mask).astype(np.float32)
        rec = {"epoch": epoch, "loss": sum(losses) / len(y), "train_acc": correct / len(y),
               "sparsity": model.sparsity(), "qat": qat, "lr": lr}
        history.append(rec)
        log.info("epoch %d loss %.4f acc %.4f sparsity %.3f qat %s", epoch, rec["loss"],
                 rec["train_acc"], rec["sparsity"], qat)

    if eval_set is not None and model.calibrated:
        acc, _ = evaluate(model, *eval_set, track=False)
        history.append({"epoch": cfg.epochs, "test_acc": acc})
    model.meta["history"] = history
    model.meta["train_config"] = cfg.to_dict()
    return model


def calibrate(model: Model, images, batch_size: int = 500) -> Model:
    """Run float forward passes purely to populate activation observers."""
    net = _Net(model)
    x = np.asarray(images, dtype=np.float32)
    x = x.reshape(len(x), *model.input_shape)
    for s in range(0, len(x), batch_size):
        net.forward(x[s:s + batch_size], qat=False, calibrate=True)
    return model
