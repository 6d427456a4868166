"""Supervised training: softmax loss, Nesterov SGD, multiplicative noise.

Randomness (shuffling, flips, noise) is drawn from generators seeded by
``(seed, epoch)`` and ``(seed, epoch, sample_index)``, so results do not
depend on batch composition or evaluation order.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .network import GROUPS, NetworkSpec, NonFiniteError, forward_batch, network_backward, param_group
from .similarity import P_MIN, U_MIN

CLASS_BETA_MIN = 1e-3
DECAYED = ("W", "z", "u")


class TrainingDiverged(FloatingPointError):
    pass


def softmax_loss(scores, label: int):
    """Cross-entropy of ``softmax(scores)`` against ``label`` and its gradient."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not 0 <= label < s.size:
        raise ValueError(f"label {label} out of range for {s.size} classes")
    top = int(np.argmax(s))
    e = np.exp(s - s[top])
    rest = e.sum() - 1.0
    loss = (s[top] - s[label]) + np.log1p(rest)
    grad = e / e.sum()
    grad[label] -= 1.0
    return float(loss), grad


def softmax_loss_batch(scores: np.ndarray, labels: np.ndarray):
    """Mean loss over rows, per-row losses, and the gradient of the mean."""
    s = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= s.shape[1]):
        raise ValueError("label out of range")
    m = s.max(axis=1, keepdims=True)
    e = np.exp(s - m)
    z = e.sum(axis=1)
    rows = np.arange(s.shape[0])
    losses = (m[:, 0] - s[rows, labels]) + np.log1p(z - 1.0)
    grad = e / z[:, None]
    grad[rows, labels] -= 1.0
    return float(losses.mean()), losses, grad / s.shape[0]


@dataclass
class TrainConfig:
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr: float = 0.01
    lr_steps: list = field(default_factory=list)  # [(epoch, multiplier), ...]
    epochs: int = 300
    noise_std: float = 0.0
    seed: int = 0
    augmentation: str = "none"  # or "hflip"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.lr < 0 or self.weight_decay < 0 or self.noise_std < 0:
            raise ValueError("lr, weight_decay and noise_std must be non-negative")
        if self.augmentation not in ("none", "hflip"):
            raise ValueError(f"unknown augmentation {self.augmentation!r}")
        self.lr_steps = [(int(e), float(m)) for e, m in self.lr_steps]

    def lr_at(self, epoch: int) -> float:
        """Rate for a 0-based epoch; a step ``(e, m)`` applies from epoch ``e`` on."""
        rate = self.lr
        for e, m in self.lr_steps:
            if epoch >= e:
                rate *= m
        return rate


@dataclass
class OptimizerState:
    velocity: dict = field(default_factory=dict)
    step: int = 0
    lr: float = 0.0


def project(params: dict) -> dict:
    """Keep weights positive, orders above ``P_MIN`` and the class beta positive."""
    for name, value in params.items():
        if name.endswith(".u"):
            np.maximum(value, U_MIN, out=value)
        elif name.endswith(".p"):
            params[name] = np.maximum(value, P_MIN)
        elif name == "class.beta":
            params[name] = np.maximum(value, CLASS_BETA_MIN)
    return params


def nesterov_step(params: dict, grads: dict, state: OptimizerState, config: TrainConfig,
                  trainable=None):
    """One Nesterov update (Sutskever form) of every trainable parameter.

    ``v <- mu v - lr g'``, ``theta <- theta + mu v - lr g'`` with
    ``g' = g + wd * theta`` for W, z and u, and ``g' = g`` otherwise.
    """
    mu, lr, wd = config.momentum, state.lr, config.weight_decay
    new = {}
    for name, theta in params.items():
        theta = np.asarray(theta, dtype=np.float64)
        if trainable is not None and not trainable(name):
            new[name] = theta.copy()
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name}")
        if wd and name.rsplit(".", 1)[-1] in DECAYED:
            g = g + wd * theta
        v = state.velocity.get(name)
        v = mu * v - lr * g if v is not None else -lr * g
        state.velocity[name] = v
        new[name] = theta + mu * v - lr * g
    state.step += 1
    return project(new), state


def apply_multiplicative_noise(activations, std: float, rng, training: bool = True) -> np.ndarray:
    """Multiply elementwise by N(1, std^2) draws (identity outside training)."""
    a = np.asarray(activations, dtype=np.float64)
    if std < 0:
        raise ValueError("noise std must be non-negative")
    if not training or std == 0:
        return a
    return a * rng.normal(1.0, std, size=a.shape)


def _layer_input_shapes(spec: NetworkSpec, image_shape) -> list:
    shapes = [tuple(image_shape)]
    shapes += spec.output_shapes(image_shape)[:-1]
    return shapes


def _prepare_batch(images, idx, spec, config, epoch, shapes):
    """Augment and draw noise for the samples ``idx`` (training mode)."""
    x = images[idx].copy()
    noise = [np.empty((len(idx),) + s) for s in shapes] if config.noise_std > 0 else None
    for j, i in enumerate(idx):
        rng = np.random.default_rng((config.seed, epoch, int(i)))
        if config.augmentation == "hflip" and rng.random() < 0.5:
            x[j] = x[j][:, ::-1, :]
        if noise is not None:
            for k, s in enumerate(shapes):
                noise[k][j] = rng.normal(1.0, config.noise_std, size=s)
    return x, noise


def evaluate(spec: NetworkSpec, images, labels, batch_size: int = 256):
    """Accuracy and mean loss in evaluation mode (no noise, no augmentation)."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    correct, loss_sum = 0, 0.0
    for start in range(0, images.shape[0], batch_size):
        s = forward_batch(spec, images[start:start + batch_size])
        lab = labels[start:start + batch_size]
        _, losses, _ = softmax_loss_batch(s, lab)
        loss_sum += float(losses.sum())
        correct += int(np.sum(np.argmax(s, axis=1) == lab))
    n = images.shape[0]
    return correct / n, loss_sum / n


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    lr: float
    wall_seconds: float

    def tsv(self) -> str:
        return (f"{self.epoch}\t{self.train_loss:.10g}\t{self.train_acc:.6f}\t"
                f"{self.val_acc:.6f}\t{self.lr:.6g}\t{self.wall_seconds:.3f}")


def train(images, labels, spec: NetworkSpec, config: TrainConfig, *, val=None,
          metrics_stream=None, clock=time.perf_counter):
    """Train a copy of ``spec``; returns ``(trained_spec, [EpochMetrics, ...])``.

    ``val`` is an optional ``(images, labels)`` pair (``val_acc`` is NaN
    without it).  Each epoch's TSV line is written to ``metrics_stream`` if
    given.  ``clock`` may be replaced (e.g. by ``lambda: 0.0``) to make the
    metric lines byte-reproducible.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] == 0:
        raise ValueError("empty training set")
    spec = spec.copy()
    shapes = _layer_input_shapes(spec, images.shape[1:])
    state = OptimizerState()
    history = []
    n = images.shape[0]
    t0 = clock()
    for epoch in range(config.epochs):
        state.lr = config.lr_at(epoch)
        order = np.random.default_rng((config.seed, epoch)).permutation(n)
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x, noise = _prepare_batch(images, idx, spec, config, epoch, shapes)
            try:
                scores, cache = forward_batch(spec, x, noise=noise, keep=True)
            except NonFiniteError as err:
                raise TrainingDiverged(f"epoch {epoch}: {err}") from err
            _, losses, dscores = softmax_loss_batch(scores, labels[idx])
            if not np.all(np.isfinite(losses)):
                raise TrainingDiverged(f"epoch {epoch}: non-finite loss after the global pooling stage")
            loss_sum += float(losses.sum())
            grads = network_backward(cache, dscores)
            params, state = nesterov_step(spec.parameters(), grads, state, config, spec.trainable)
            spec.set_parameters(params)
        train_acc, _ = evaluate(spec, images, labels)
        val_acc = evaluate(spec, *val)[0] if val is not None else float("nan")
        m = EpochMetrics(epoch + 1, loss_sum / n, train_acc, val_acc, state.lr, clock() - t0)
        history.append(m)
        if metrics_stream is not None:
            metrics_stream.write(m.tsv() + "\n")
            metrics_stream.flush()
    return spec, history


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: dict  # group -> worst relative error
    tolerance: float
    checked: int

    @property
    def failed_groups(self) -> list:
        return [g for g, e in self.max_rel_err.items() if e > self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failed_groups

    def format(self) -> str:
        lines = [f"{'group':<12} {'max rel-err':>12}  status"]
        for g, e in self.max_rel_err.items():
            lines.append(f"{g:<12} {e:12.3e}  {'ok' if e <= self.tolerance else 'FAIL'}")
        return "\n".join(lines)


def _loss_of(spec, x, label) -> float:
    return softmax_loss(forward_batch(spec, x)[0], label)[0]


def grad_check(spec: NetworkSpec, x, label: int, tolerance: float = 1e-4, step: float = 1e-6,
               backward=network_backward) -> GradCheckReport:
    """Compare analytic gradients of the softmax loss with central differences.

    Every entry of every parameter is perturbed.  ``backward`` can be
    swapped to check a different (e.g. deliberately broken) gradient routine.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    scores, cache = forward_batch(spec, x, keep=True)
    _, g = softmax_loss(scores[0], label)
    analytic = backward(cache, g[None])
    params = spec.parameters()
    worst = {}
    checked = 0
    probe = spec.copy()
    for name, value in params.items():
        a = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        flat = value.reshape(-1)
        group = param_group(name)
        for j in range(flat.size):
            plus, minus = flat.copy(), flat.copy()
            plus[j] += step
            minus[j] -= step
            probe.set_parameters({name: plus.reshape(value.shape)})
            lp = _loss_of(probe, x, label)
            probe.set_parameters({name: minus.reshape(value.shape)})
            lm = _loss_of(probe, x, label)
            probe.set_parameters({name: value})
            f = (lp - lm) / (2 * step)
            err = abs(a[j] - f) / max(abs(a[j]), abs(f), 1e-8)
            worst[group] = max(worst.get(group, 0.0), err)
            checked += 1
    ordered = {gname: worst[gname] for gname in GROUPS if gname in worst}
    return GradCheckReport(ordered, tolerance, checked)
