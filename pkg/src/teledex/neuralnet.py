"""Small dense networks with hand-written backpropagation and AdamW.

Everything runs in float64 with a fixed summation order, so training is
reproducible given the seed.  Layers expose ``forward(x, train)`` returning
``(y, cache)`` and ``backward(cache, grad_y)`` returning
``(grad_x, param_grads)``; ``param_grads`` is aligned with ``params()``.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)


class BatchError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


# --- layers -------------------------------------------------------------------------

class Linear:
    kind = "linear"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        bound = 1.0 / math.sqrt(n_in)
        rng = rng or np.random.default_rng(0)
        self.W = rng.uniform(-bound, bound, size=(n_out, n_in))
        self.b = rng.uniform(-bound, bound, size=n_out)

    @property
    def n_in(self):
        return self.W.shape[1]

    @property
    def n_out(self):
        return self.W.shape[0]

    def params(self):
        return [self.W, self.b]

    def forward(self, x, train=False):
        return x @ self.W.T + self.b, x

    def backward(self, x, gy):
        return gy @ self.W, [gy.T @ x, gy.sum(axis=0)]

    def apply_rowwise(self, x):
        """Same map as ``forward`` but each row's result is independent of the batch.

        BLAS picks different kernels for different batch shapes, which can
        change the last bit of a row.  Accumulating one input column at a time
        fixes the summation order per output element.
        """
        x = np.asarray(x, dtype=float)
        out = np.zeros((x.shape[0], self.n_out))
        for i in range(self.n_in):
            out += x[:, i:i + 1] * self.W[:, i]
        return out + self.b

    def to_dict(self):
        return {"type": self.kind, "W": self.W.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_dict(cls, d):
        layer = cls.__new__(cls)
        layer.W = np.array(d["W"], dtype=float)
        layer.b = np.array(d["b"], dtype=float)
        return layer


class LeakyReLU:
    kind = "leaky_relu"

    def __init__(self, slope: float = 0.01):
        self.slope = slope

    def params(self):
        return []

    def forward(self, x, train=False):
        return np.where(x > 0, x, self.slope * x), x

    def backward(self, x, gy):
        return np.where(x > 0, gy, self.slope * gy), []

    def to_dict(self):
        return {"type": self.kind, "slope": self.slope}

    @classmethod
    def from_dict(cls, d):
        return cls(d["slope"])


class Tanh:
    kind = "tanh"

    def params(self):
        return []

    def forward(self, x, train=False):
        y = np.tanh(x)
        return y, y

    def backward(self, y, gy):
        return gy * (1.0 - y * y), []

    def to_dict(self):
        return {"type": self.kind}

    @classmethod
    def from_dict(cls, d):
        return cls()


class BatchNorm:
    """Per-feature batch normalisation.

    Train mode normalises with the (biased) batch variance and updates the
    running statistics as ``new = (1 - m) * old + m * batch``, using the
    unbiased batch variance for the running estimate.
    """

    kind = "batchnorm"

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x, train=False):
        if train:
            B = x.shape[0]
            if B < 2:
                raise BatchError("batchnorm in train mode needs at least 2 samples")
            mu = x.mean(axis=0)
            xc = x - mu
            var = (xc * xc).mean(axis=0)
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = xc * inv
            m = self.momentum
            self.running_mean[:] = (1 - m) * self.running_mean + m * mu
            self.running_var[:] = (1 - m) * self.running_var + m * var * (B / (B - 1))
            return self.gamma * xhat + self.beta, (xhat, inv)
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        return self.gamma * ((x - self.running_mean) * inv) + self.beta, None

    def backward(self, cache, gy):
        if cache is None:
            raise BatchError("batchnorm backward needs a train-mode cache")
        xhat, inv = cache
        g_gamma = (gy * xhat).sum(axis=0)
        g_beta = gy.sum(axis=0)
        gxhat = gy * self.gamma
        gx = inv * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
        return gx, [g_gamma, g_beta]

    def to_dict(self):
        return {"type": self.kind, "gamma": self.gamma.tolist(), "beta": self.beta.tolist(),
                "running_mean": self.running_mean.tolist(), "running_var": self.running_var.tolist(),
                "momentum": self.momentum, "eps": self.eps}

    @classmethod
    def from_dict(cls, d):
        layer = cls(len(d["gamma"]), d["momentum"], d["eps"])
        layer.gamma = np.array(d["gamma"], dtype=float)
        layer.beta = np.array(d["beta"], dtype=float)
        layer.running_mean = np.array(d["running_mean"], dtype=float)
        layer.running_var = np.array(d["running_var"], dtype=float)
        if np.any(layer.running_var <= 0):
            raise ValueError("running variance must be positive")
        return layer


LAYER_TYPES = {cls.kind: cls for cls in (Linear, LeakyReLU, Tanh, BatchNorm)}


class DenseNet:
    def __init__(self, layers: Sequence):
        self.layers = list(layers)
        dims = [(l.n_in, l.n_out) for l in self.layers if isinstance(l, Linear)]
        for (_, out), (nxt, _) in zip(dims, dims[1:]):
            if out != nxt:
                raise ValueError(f"incompatible layer sizes {out} -> {nxt}")
        width = None
        for l in self.layers:
            if isinstance(l, Linear):
                width = l.n_out
            elif isinstance(l, BatchNorm) and width is not None and len(l.gamma) != width:
                raise ValueError("batchnorm width does not match preceding linear layer")

    @property
    def n_in(self) -> int:
        return next(l.n_in for l in self.layers if isinstance(l, Linear))

    @property
    def n_out(self) -> int:
        return [l for l in self.layers if isinstance(l, Linear)][-1].n_out

    def params(self) -> list[np.ndarray]:
        return [p for l in self.layers for p in l.params()]

    def forward(self, x, train: bool = False):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"expected batch of width {self.n_in}, got shape {x.shape}")
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, train)
            caches.append(c)
        return x, caches

    def __call__(self, x):
        return self.forward(x, train=False)[0]

    def backward(self, caches, grad_out):
        if len(caches) != len(self.layers):
            raise ValueError("cache does not match this network")
        grads: list[list[np.ndarray]] = []
        g = grad_out
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            g, pg = layer.backward(c, g)
            grads.append(pg)
        flat = [p for pg in reversed(grads) for p in pg]
        return flat, g

    def to_dict(self) -> dict:
        return {"layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d) -> "DenseNet":
        return cls([LAYER_TYPES[l["type"]].from_dict(l) for l in d["layers"]])

    def copy(self) -> "DenseNet":
        return copy.deepcopy(self)


def mlp(sizes: Sequence[int], rng: np.random.Generator, slope: float = 0.01, batchnorm: bool = False,
        tanh_out: bool = False) -> DenseNet:
    """``Linear -> LeakyReLU [-> BN]`` blocks, then a linear (optionally tanh) head."""
    layers = []
    for a, b in zip(sizes[:-2], sizes[1:-1]):
        layers += [Linear(a, b, rng), LeakyReLU(slope)]
        if batchnorm:
            layers.append(BatchNorm(b))
    layers.append(Linear(sizes[-2], sizes[-1], rng))
    if tanh_out:
        layers.append(Tanh())
    return DenseNet(layers)


# --- loss and optimiser -----------------------------------------------------------------------

def mse_loss(pred, target):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    d = pred - target
    n = d.size
    return float(np.sum(d * d) / n), 2.0 * d / n


@dataclass
class AdamW:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        """Update ``params`` in place: decoupled decay, then bias-corrected Adam."""
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
            raise ValueError("gradient shapes do not match parameters")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --- gradient check -------------------------------------------------------------------

def grad_check(net, loss: Callable, batch, eps: float = 1e-5, floor: float = 1e-6,
               min_eps: float = 1e-9) -> float:
    """Largest relative error between backprop and central differences.

    ``loss(pred)`` returns ``(value, grad_pred)``.  Runs in train mode; the
    network's running statistics are restored afterwards.  Relative error is
    ``|a - n| / max(|a| + |n|, floor)``; the floor sits above the
    roundoff noise of the difference quotient (about ``1e-16 |loss| / eps``)
    so gradients that are exactly zero do not register as failures.

    A difference whose +/- perturbation flips the sign of any LeakyReLU
    input straddles a kink and is not a derivative estimate; the step is
    shrunk tenfold (down to ``min_eps``) until no pre-activation changes side.
    """
    saved = copy.deepcopy(net)
    try:
        pred, caches = net.forward(batch, train=True)
        _, gpred = loss(pred)
        analytic, _ = net.backward(caches, gpred)
        base = _kink_signs(net, caches)
        worst = 0.0
        for p, ga in zip(net.params(), analytic):
            flat = p.reshape(-1)
            gaf = ga.reshape(-1)
            for i in range(flat.size):
                h = eps
                while True:
                    num, same_side = _central(net, loss, batch, flat, i, h, base)
                    if same_side or h / 10 < min_eps:
                        break
                    h /= 10
                err = abs(gaf[i] - num) / max(abs(gaf[i]) + abs(num), floor)
                worst = max(worst, err)
        return worst
    finally:
        _restore(net, saved)


def _kink_signs(net, caches):
    layers = getattr(net, "layers", None)
    if layers is None:
        return None
    return [c > 0 for l, c in zip(layers, caches) if isinstance(l, LeakyReLU)]


def _central(net, loss, batch, flat, i, h, base=None):
    orig = flat[i]
    flat[i] = orig + h
    pred_p, cache_p = net.forward(batch, train=True)
    flat[i] = orig - h
    pred_m, cache_m = net.forward(batch, train=True)
    flat[i] = orig
    same = True
    if base is not None:
        same = all(np.array_equal(b, s) for b, s in zip(base, _kink_signs(net, cache_p))) and \
            all(np.array_equal(b, s) for b, s in zip(base, _kink_signs(net, cache_m)))
    return (loss(pred_p)[0] - loss(pred_m)[0]) / (2 * h), same


def _restore(net, saved):
    net.__dict__.update(copy.deepcopy(saved.__dict__))


# --- training loop -----------------------------------------------------------------------

@dataclass
class FitResult:
    train_loss: list[float]
    val_loss: list[float]
    init_train_loss: float
    init_val_loss: float
    best_epoch: int
    stop_reason: str


def evaluate_loss(net, X, Y, batch_size: int = 8192) -> float:
    """Full-pass inference-mode MSE, accumulated in a fixed order."""
    total = 0.0
    for i in range(0, len(X), batch_size):
        pred = net.forward(X[i:i + batch_size], train=False)[0]
        d = pred - Y[i:i + batch_size]
        total += float(np.sum(d * d))
    return total / Y.size


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; the last partial batch is kept, a size-1 tail is merged."""
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        tail = out.pop()
        out[-1] = np.concatenate([out[-1], tail])
    return out


def fit(net, opt: AdamW, X, Y, Xv, Yv, epochs: int, batch_size: int, rng: np.random.Generator,
        patience: int | None = 20, min_delta: float = 1e-6) -> FitResult:
    """Minibatch MSE training with early stopping on validation loss.

    On return ``net`` holds the parameters of the best-validation epoch
    (or the initial parameters when no epoch improved on them).
    Epoch losses are inference-mode full passes at the end of each epoch.
    """
    init_train = evaluate_loss(net, X, Y)
    init_val = evaluate_loss(net, Xv, Yv) if len(Xv) else float("nan")
    best_val = ref_val = init_val
    best_state = copy.deepcopy(net.__dict__)
    best_epoch = 0
    since = 0
    tl, vl = [], []
    reason = "max-epochs"
    for epoch in range(1, epochs + 1):
        for idx in batches(len(X), batch_size, rng):
            pred, caches = net.forward(X[idx], train=True)
            _, g = mse_loss(pred, Y[idx])
            grads, _ = net.backward(caches, g)
            opt.step(net.params(), grads)
        t = evaluate_loss(net, X, Y)
        v = evaluate_loss(net, Xv, Yv) if len(Xv) else t
        if not (math.isfinite(t) and math.isfinite(v)):
            raise TrainingError(epoch, f"non-finite loss (train {t}, val {v})")
        tl.append(t)
        vl.append(v)
        # the best epoch is the lowest validation loss; only the patience counter uses min_delta
        if not best_val == best_val or v < best_val:
            best_val, best_epoch = v, epoch
            best_state = copy.deepcopy(net.__dict__)
        if not ref_val == ref_val or v < ref_val - min_delta:
            ref_val, since = v, 0
        else:
            since += 1
            if patience is not None and since >= patience:
                reason = "early-stop"
                break
        log.debug("epoch %d train %.3e val %.3e", epoch, t, v)
    net.__dict__.update(best_state)
    return FitResult(tl, vl, init_train, init_val, best_epoch, reason)
