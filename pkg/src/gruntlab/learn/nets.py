"""CRNN and stacked-LSTM classifiers with hand-written forward/backward passes.

Inputs are batches shaped (B, T, D): time steps along axis 1, feature channels
along axis 2. Convolutions run over time with the D features as input channels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

ARCHITECTURES = ("lstm_rnn", "crnn")
DROPOUT = 0.5
CLIP_NORM = 5.0

# (filters, kernel) per conv block
CONV_SEQ_SMALL = ((10, 6), (20, 8), (40, 10))   # MFCCs and spectrograms
CONV_SEQ_LLD = ((30, 10), (30, 8), (40, 10))    # LLDs


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConvBlock:
    filters: int
    kernel: int
    pool: int = 2
    dropout: float = DROPOUT


@dataclass(frozen=True)
class NetConfig:
    architecture: str
    input_shape: Tuple[int, int]
    conv_blocks: Tuple[ConvBlock, ...] = ()
    lstm_hidden: int = 64
    lstm_layers: int = 2
    bidirectional: bool = False
    n_classes: int = 2
    padding: str = "same"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "conv_blocks", tuple(
            b if isinstance(b, ConvBlock) else ConvBlock(**b) for b in self.conv_blocks))
        self.validate()

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if len(self.input_shape) != 2 or min(self.input_shape) < 1:
            raise ValueError(f"invalid input shape {self.input_shape}")
        if self.lstm_layers != 2:
            raise ValueError("lstm_layers must be 2")
        if self.lstm_hidden < 1 or self.n_classes < 2:
            raise ValueError("invalid hidden size or class count")
        if self.padding not in ("same", "valid"):
            raise ValueError("padding must be 'same' or 'valid'")
        if self.architecture == "crnn":
            if len(self.conv_blocks) != 3:
                raise ValueError("crnn needs exactly 3 conv blocks")
            if any(b.dropout != DROPOUT for b in self.conv_blocks):
                raise ValueError("crnn dropout must be 0.5")
            if any(b.pool < 1 or b.kernel < 1 or b.filters < 1 for b in self.conv_blocks):
                raise ValueError("invalid conv block")
        elif self.conv_blocks:
            raise ValueError("lstm_rnn takes no conv blocks")
        self.time_steps()  # raises when the conv/pool chain collapses

    def time_steps(self) -> List[int]:
        """Sequence length at the input and after each conv block."""
        t = self.input_shape[0]
        out = [t]
        for b in self.conv_blocks:
            t = conv_out_len(t, b.kernel, self.padding) // b.pool
            if t < 1:
                raise ValueError(f"conv/pool chain collapses the time axis: {out + [t]}")
            out.append(t)
        return out

    @property
    def representation_size(self) -> int:
        return self.lstm_hidden * (2 if self.bidirectional else 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["conv_blocks"] = tuple(ConvBlock(**b) for b in d.get("conv_blocks", ()))
        return cls(**d)

    @classmethod
    def crnn(cls, input_shape, blocks=None, feature: str = "mfcc", **kw) -> "NetConfig":
        if blocks is None:
            blocks = CONV_SEQ_LLD if feature == "lld" else CONV_SEQ_SMALL
        return cls("crnn", tuple(input_shape), tuple(ConvBlock(f, k) for f, k in blocks),
                   bidirectional=True, **kw)

    @classmethod
    def lstm_rnn(cls, input_shape, **kw) -> "NetConfig":
        return cls("lstm_rnn", tuple(input_shape), (), bidirectional=False, **kw)


def conv_out_len(t: int, kernel: int, padding: str) -> int:
    return t if padding == "same" else t - kernel + 1


def _pad_amounts(kernel: int, padding: str) -> Tuple[int, int]:
    if padding == "valid":
        return 0, 0
    return (kernel - 1) // 2, kernel // 2


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 5e-5
    epochs: int = 30
    seed: int = 0
    optimizer: str = "adam"
    clip_norm: Optional[float] = CLIP_NORM

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be adam or sgd")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


# --------------------------------------------------------------------------
# parameters


def param_shapes(config: NetConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    shapes = []
    channels = config.input_shape[1]
    for i, b in enumerate(config.conv_blocks):
        shapes.append((f"conv{i}.W", (b.kernel, channels, b.filters)))
        shapes.append((f"conv{i}.b", (b.filters,)))
        channels = b.filters
    h = config.lstm_hidden
    dirs = ("f", "b") if config.bidirectional else ("f",)
    width = channels
    for layer in range(config.lstm_layers):
        for d in dirs:
            shapes.append((f"lstm{layer}.{d}.W", (width + h, 4 * h)))
            shapes.append((f"lstm{layer}.{d}.b", (4 * h,)))
        width = h * len(dirs)
    shapes.append(("dense.W", (config.representation_size, config.n_classes)))
    shapes.append(("dense.b", (config.n_classes,)))
    return shapes


class NetParams:
    """All weights of one network, stored in a single flat float64 vector."""

    def __init__(self, config: NetConfig, vector: Optional[np.ndarray] = None):
        self.config = config
        self.shapes = param_shapes(config)
        size = sum(int(np.prod(s)) for _, s in self.shapes)
        if vector is None:
            vector = np.zeros(size)
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (size,):
            raise ValueError(f"parameter vector must have {size} entries, got {vector.shape}")
        self.vector = vector
        self.views = _views(vector, self.shapes)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.views[name]

    @property
    def size(self) -> int:
        return self.vector.size

    def copy(self) -> "NetParams":
        return NetParams(self.config, self.vector.copy())


def _views(vector: np.ndarray, shapes) -> Dict[str, np.ndarray]:
    out = {}
    pos = 0
    for name, shape in shapes:
        n = int(np.prod(shape))
        out[name] = vector[pos:pos + n].reshape(shape)
        pos += n
    return out


def net_init(config: NetConfig, seed: int) -> NetParams:
    rng = np.random.default_rng(seed)
    params = NetParams(config)
    h = config.lstm_hidden
    for name, shape in params.shapes:
        view = params[name]
        if name.startswith("conv") and name.endswith(".W"):
            k, cin, cout = shape
            lim = np.sqrt(6.0 / (k * cin + k * cout))
            view[...] = rng.uniform(-lim, lim, shape)
        elif name.startswith("lstm") and name.endswith(".W"):
            n_in = shape[0] - h
            lim = np.sqrt(6.0 / (n_in + 4 * h))
            view[:n_in] = rng.uniform(-lim, lim, (n_in, 4 * h))
            view[n_in:] = rng.uniform(-1.0 / np.sqrt(h), 1.0 / np.sqrt(h), (h, 4 * h))
        elif name.startswith("lstm") and name.endswith(".b"):
            view[h:2 * h] = 1.0  # forget gate
        elif name == "dense.W":
            lim = np.sqrt(6.0 / (shape[0] + shape[1]))
            view[...] = rng.uniform(-lim, lim, shape)
    return params


# --------------------------------------------------------------------------
# layers


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _conv_forward(x, W, b, padding):
    k = W.shape[0]
    left, right = _pad_amounts(k, padding)
    xp = np.pad(x, ((0, 0), (left, right), (0, 0))) if left or right else x
    t_out = xp.shape[1] - k + 1
    z = np.broadcast_to(b, (x.shape[0], t_out, W.shape[2])).copy()
    for j in range(k):
        z += xp[:, j:j + t_out, :] @ W[j]
    return z, xp


def _conv_backward(dz, xp, W, padding, need_dx):
    k = W.shape[0]
    t_out = dz.shape[1]
    dW = np.empty_like(W)
    flat_dz = dz.reshape(-1, dz.shape[2])
    for j in range(k):
        dW[j] = xp[:, j:j + t_out, :].reshape(-1, xp.shape[2]).T @ flat_dz
    db = flat_dz.sum(axis=0)
    if not need_dx:
        return None, dW, db
    dxp = np.zeros_like(xp)
    for j in range(k):
        dxp[:, j:j + t_out, :] += dz @ W[j].T
    left, right = _pad_amounts(k, padding)
    dx = dxp[:, left:dxp.shape[1] - right, :] if left or right else dxp
    return dx, dW, db


def _lstm_forward(x, W, b, h_size):
    """One direction over x (B, T, I); returns hidden sequence and per-step cache."""
    bsz, steps, _ = x.shape
    h = np.zeros((bsz, h_size))
    c = np.zeros((bsz, h_size))
    hs = np.empty((bsz, steps, h_size))
    cache = []
    for t in range(steps):
        xh = np.concatenate([x[:, t, :], h], axis=1)
        z = xh @ W + b
        i = _sigmoid(z[:, :h_size])
        f = _sigmoid(z[:, h_size:2 * h_size])
        g = np.tanh(z[:, 2 * h_size:3 * h_size])
        o = _sigmoid(z[:, 3 * h_size:])
        c_prev = c
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[:, t, :] = h
        cache.append((xh, i, f, g, o, c_prev, tc))
    return hs, cache


def _lstm_backward(dhs, cache, W, h_size, n_in):
    bsz, steps, _ = dhs.shape
    dW = np.zeros_like(W)
    db = np.zeros(W.shape[1])
    dx = np.empty((bsz, steps, n_in))
    dh_next = np.zeros((bsz, h_size))
    dc_next = np.zeros((bsz, h_size))
    for t in range(steps - 1, -1, -1):
        xh, i, f, g, o, c_prev, tc = cache[t]
        dh = dhs[:, t, :] + dh_next
        do = dh * tc
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = np.concatenate([dc * g * i * (1.0 - i),
                             dc * c_prev * f * (1.0 - f),
                             dc * i * (1.0 - g * g),
                             do * o * (1.0 - o)], axis=1)
        dW += xh.T @ dz
        db += dz.sum(axis=0)
        dxh = dz @ W.T
        dx[:, t, :] = dxh[:, :n_in]
        dh_next = dxh[:, n_in:]
        dc_next = dc * f
    return dx, dW, db


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# network


@dataclass
class ForwardCache:
    x: np.ndarray
    conv: List[tuple] = field(default_factory=list)
    lstm: List[dict] = field(default_factory=list)
    rep: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None


def _check_input(params: NetParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != params.config.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match config {params.config.input_shape}")
    return x


def net_forward(params: NetParams, x: np.ndarray, mode: str = "eval",
                dropout_seed: Optional[int] = None):
    """Logits for a (B, T, D) batch (or a single T x D sample) and the activation cache.

    Train mode applies inverted dropout after each conv block using masks drawn
    from ``dropout_seed``; eval mode is deterministic.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    cfg = params.config
    x = _check_input(params, x)
    cache = ForwardCache(x)
    rng = np.random.default_rng(dropout_seed) if mode == "train" else None
    a = x
    for i, blk in enumerate(cfg.conv_blocks):
        z, xp = _conv_forward(a, params[f"conv{i}.W"], params[f"conv{i}.b"], cfg.padding)
        r = np.maximum(z, 0.0)
        t_pool = r.shape[1] // blk.pool
        win = r[:, :t_pool * blk.pool, :].reshape(r.shape[0], t_pool, blk.pool, r.shape[2])
        arg = win.argmax(axis=2)
        pooled = np.take_along_axis(win, arg[:, :, None, :], axis=2)[:, :, 0, :]
        mask = None
        if rng is not None and blk.dropout > 0:
            keep = 1.0 - blk.dropout
            mask = (rng.random(pooled.shape) < keep) / keep
            pooled = pooled * mask
        cache.conv.append((xp, z, arg, mask, r.shape))
        a = pooled

    h = cfg.lstm_hidden
    seq = a
    last = None
    for layer in range(cfg.lstm_layers):
        entry = {"n_in": seq.shape[2]}
        hs_f, cf = _lstm_forward(seq, params[f"lstm{layer}.f.W"], params[f"lstm{layer}.f.b"], h)
        entry["f"] = cf
        if cfg.bidirectional:
            hs_b, cb = _lstm_forward(seq[:, ::-1, :], params[f"lstm{layer}.b.W"],
                                     params[f"lstm{layer}.b.b"], h)
            entry["b"] = cb
            out = np.concatenate([hs_f, hs_b[:, ::-1, :]], axis=2)
            last = np.concatenate([hs_f[:, -1, :], hs_b[:, -1, :]], axis=1)
        else:
            out = hs_f
            last = hs_f[:, -1, :]
        cache.lstm.append(entry)
        seq = out
    cache.rep = last
    cache.logits = last @ params["dense.W"] + params["dense.b"]
    return cache.logits, cache


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    return logz - z[np.arange(len(labels)), labels]


def net_backward(params: NetParams, cache: Optional[ForwardCache], labels) -> np.ndarray:
    """Gradient of the summed softmax cross-entropy over the cached batch."""
    if cache is None or cache.logits is None:
        raise ValueError("net_backward needs the cache of a forward pass")
    cfg = params.config
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape[0] != cache.logits.shape[0]:
        raise ValueError("label count does not match the cached batch")
    grad = NetParams(cfg)
    g = grad.views

    dlogits = softmax(cache.logits)
    dlogits[np.arange(labels.size), labels] -= 1.0
    g["dense.W"][...] = cache.rep.T @ dlogits
    g["dense.b"][...] = dlogits.sum(axis=0)
    drep = dlogits @ params["dense.W"].T

    h = cfg.lstm_hidden
    bsz = cache.x.shape[0]
    dseq = None
    for layer in range(cfg.lstm_layers - 1, -1, -1):
        entry = cache.lstm[layer]
        steps = len(entry["f"])
        n_in = entry["n_in"]
        if dseq is None:
            dhs_f = np.zeros((bsz, steps, h))
            dhs_f[:, -1, :] = drep[:, :h]
            if cfg.bidirectional:
                dhs_b = np.zeros((bsz, steps, h))
                dhs_b[:, -1, :] = drep[:, h:]
        else:
            dhs_f = dseq[:, :, :h]
            if cfg.bidirectional:
                dhs_b = dseq[:, ::-1, h:]
        dx, dW, db = _lstm_backward(dhs_f, entry["f"], params[f"lstm{layer}.f.W"], h, n_in)
        g[f"lstm{layer}.f.W"][...] = dW
        g[f"lstm{layer}.f.b"][...] = db
        if cfg.bidirectional:
            dxb, dW, db = _lstm_backward(dhs_b, entry["b"], params[f"lstm{layer}.b.W"], h, n_in)
            g[f"lstm{layer}.b.W"][...] = dW
            g[f"lstm{layer}.b.b"][...] = db
            dx = dx + dxb[:, ::-1, :]
        dseq = dx

    da = dseq
    for i in range(len(cfg.conv_blocks) - 1, -1, -1):
        blk = cfg.conv_blocks[i]
        xp, z, arg, mask, rshape = cache.conv[i]
        if mask is not None:
            da = da * mask
        dr = np.zeros(rshape)
        t_pool = arg.shape[1]
        dwin = dr[:, :t_pool * blk.pool, :].reshape(rshape[0], t_pool, blk.pool, rshape[2])
        np.put_along_axis(dwin, arg[:, :, None, :], da[:, :, None, :], axis=2)
        dz = dr * (z > 0)
        da, dW, db = _conv_backward(dz, xp, params[f"conv{i}.W"], cfg.padding, need_dx=i > 0)
        g[f"conv{i}.W"][...] = dW
        g[f"conv{i}.b"][...] = db
    return grad.vector


def net_loss(params: NetParams, x, labels, mode="eval", dropout_seed=None) -> float:
    logits, _ = net_forward(params, x, mode, dropout_seed)
    return float(cross_entropy(logits, np.atleast_1d(labels)).sum())


def net_predict(params: NetParams, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    x = _check_input(params, x)
    out = []
    for s in range(0, x.shape[0], batch_size):
        logits, _ = net_forward(params, x[s:s + batch_size], "eval")
        out.append(logits)
    return np.concatenate(out) if out else np.zeros((0, params.config.n_classes))


# --------------------------------------------------------------------------
# training


class Adam:
    def __init__(self, size: int, lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        theta -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class Sgd:
    def __init__(self, size: int, lr: float):
        self.lr = lr

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        theta -= self.lr * grad


def net_train(config: NetConfig, train: TrainConfig, X: np.ndarray, y,
              init: Optional[NetParams] = None) -> Tuple[NetParams, List[float]]:
    """Mini-batch training; returns final parameters and the mean training loss of each epoch."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise ValueError("empty training data")
    if X.shape[0] != y.shape[0]:
        raise ValueError("X and y lengths differ")
    if np.unique(y).size < 2:
        raise ValueError("training data needs at least one sample per class")
    rng = np.random.default_rng(train.seed)
    params = init.copy() if init is not None else net_init(config, int(rng.integers(2 ** 31)))
    opt = Adam(params.size, train.learning_rate) if train.optimizer == "adam" \
        else Sgd(params.size, train.learning_rate)
    history = []
    n = X.shape[0]
    for epoch in range(train.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, train.batch_size):
            idx = order[s:s + train.batch_size]
            logits, cache = net_forward(params, X[idx], "train", int(rng.integers(2 ** 31)))
            loss = cross_entropy(logits, y[idx]).sum()
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {s}: "
                                    f"|theta|max={np.abs(params.vector).max():.3g}")
            total += loss
            grad = net_backward(params, cache, y[idx]) / idx.size
            if train.clip_norm:
                norm = np.linalg.norm(grad)
                if norm > train.clip_norm:
                    grad *= train.clip_norm / norm
            opt.step(params.vector, grad)
            if not np.all(np.isfinite(params.vector)):
                raise TrainingError(f"non-finite parameters after epoch {epoch}, batch {s}")
        history.append(total / n)
    return params, history


# --------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    trials: int
    n_params: int
    per_trial_max: List[float]

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and np.isfinite(self.mean_rel_error))


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_gradient(params: NetParams, x, labels, mode="train", dropout_seed=0,
                     h: float = 1e-5) -> np.ndarray:
    """Central differences of the summed cross-entropy, one parameter at a time."""
    theta = params.vector
    grad = np.empty_like(theta)
    for j in range(theta.size):
        old = theta[j]
        theta[j] = old + h
        fp = net_loss(params, x, labels, mode, dropout_seed)
        theta[j] = old - h
        fm = net_loss(params, x, labels, mode, dropout_seed)
        theta[j] = old
        grad[j] = (fp - fm) / (2 * h)
    return grad


def grad_check(config: NetConfig, n_trials: int = 20, seed: int = 0, batch: int = 2,
               h: float = 1e-5, include_zero_input: bool = True) -> GradCheckReport:
    """Analytic vs central-difference gradients on randomized parameters and inputs.

    Relative error is |a - n| / max(|a|, |n|, 1e-6). Central differences at
    h = 1e-5 carry ~1e-11 absolute round-off, so gradients below the floor are
    judged on absolute error instead.
    """
    rng = np.random.default_rng(seed)
    per_trial, all_errs = [], []
    for trial in range(n_trials):
        params = net_init(config, int(rng.integers(2 ** 31)))
        params.vector += 0.1 * rng.standard_normal(params.size)
        if include_zero_input and trial == 0:
            x = np.zeros((batch,) + config.input_shape)
        else:
            x = rng.standard_normal((batch,) + config.input_shape)
        labels = rng.integers(0, config.n_classes, batch)
        dseed = int(rng.integers(2 ** 31))
        _, cache = net_forward(params, x, "train", dseed)
        analytic = net_backward(params, cache, labels)
        numeric = numeric_gradient(params, x, labels, "train", dseed, h)
        err = rel_error(analytic, numeric)
        per_trial.append(float(err.max()))
        all_errs.append(err)
    errs = np.concatenate(all_errs)
    return GradCheckReport(float(errs.max()), float(errs.mean()), n_trials,
                           param_shapes_size(config), per_trial)


def param_shapes_size(config: NetConfig) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(config))


def tiny_config(architecture: str) -> NetConfig:
    """The small configuration used by the gradient checker (T=8, D=3, hidden 4)."""
    if architecture == "crnn":
        return NetConfig.crnn((8, 3), blocks=((2, 3), (2, 2), (2, 3)), lstm_hidden=4)
    return NetConfig.lstm_rnn((8, 3), lstm_hidden=4)


__all__: Sequence[str] = [
    "ConvBlock", "NetConfig", "TrainConfig", "NetParams", "net_init", "net_forward",
    "net_backward", "net_train", "net_predict", "grad_check", "softmax", "cross_entropy",
]
