"""Desk-scale classifiers with exact input gradients, and their training.

Two architectures, both plain numpy with hand-written backward passes so
attacks get analytic input gradients with no framework dependency: a flat
softmax regression and a small convolutional net (3x3 convolutions with 16
then 32 channels, each followed by tanh and 2x average pooling, a 128-unit
tanh dense layer, and a softmax head). Training is deterministic given the
seed: plain mini-batch gradient descent, optionally on adversarially
perturbed batches.

Checkpoint container (version 1, all integers little-endian):

    bytes 0..7   magic b"WADVCKPT"
    uint16       format version (1)
    uint16       architecture tag length, then that many utf-8 bytes
    uint8        input ndim D, then D x uint32 input dims
    uint16       number of classes
    uint16       parameter count P, then P table entries:
                     uint16 name length, utf-8 name,
                     uint8 ndim, ndim x uint32 dims
    payload      P raveled float32 arrays, C order, table order
"""

import os
import struct
import tempfile
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .attacks import ThreatModel, attack_batch
from .errors import CheckpointFormatError, DimensionMismatch, NotFittedError
from .sinkhorn import DEFAULT_LAM_TRAINING, TRAINING_LIMITS
from .validation import as_labels

_MAGIC = b"WADVCKPT"
_VERSION = 1


def _softmax_rows(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy_rows(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return lse - shifted[np.arange(len(labels)), labels]


class _ClassifierBase:
    """Shared shape plumbing: single images and batches both accepted."""

    def _check_built(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("parameters missing; construct or load first")

    def _as_batch(self, X):
        X = np.asarray(X, dtype=np.float64)
        shape = tuple(self.input_shape)
        if X.shape == shape:
            return X[None], True
        if X.ndim == len(shape) + 1 and X.shape[1:] == shape:
            return X, False
        raise DimensionMismatch(
            f"expected input shape {shape} or a batch of them, got {X.shape}"
        )

    def _logits_chunked(self, batch, chunk=256):
        # Inference only; bounds the im2col workspace on large batches.
        if len(batch) <= chunk:
            return self._forward(batch)[0]
        return np.concatenate([
            self._forward(batch[lo:lo + chunk])[0]
            for lo in range(0, len(batch), chunk)
        ])

    def forward(self, X):
        """Logits for one image or a batch of them."""
        batch, single = self._as_batch(X)
        logits = self._logits_chunked(batch)
        return logits[0] if single else logits

    def predict(self, X):
        batch, single = self._as_batch(X)
        labels = self._logits_chunked(batch).argmax(axis=1)
        return int(labels[0]) if single else labels

    def score(self, X, y):
        """Top-1 accuracy."""
        batch, _ = self._as_batch(np.asarray(X, dtype=np.float64))
        y = as_labels(y, len(batch))
        return float((self._logits_chunked(batch).argmax(axis=1) == y).mean())

    def loss_and_input_gradient(self, X, y):
        """Per-example cross-entropy and its exact gradient at the input.

        For a single image returns (float, gradient of that image's loss);
        for a batch, per-example loss and gradient arrays (not averaged).
        """
        batch, single = self._as_batch(X)
        if single:
            labels = np.array([int(y)], dtype=np.int64)
        else:
            labels = as_labels(y, len(batch))
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError("label out of range")
        logits, cache = self._forward(batch)
        losses = _cross_entropy_rows(logits, labels)
        dlogits = _softmax_rows(logits)
        dlogits[np.arange(len(labels)), labels] -= 1.0
        grad = self._backward_input(dlogits, cache)
        if single:
            return float(losses[0]), grad[0]
        return losses, grad

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._param_names}

    def set_params(self, **params):
        for k, v in params.items():
            if k not in self._param_names:
                raise ValueError(f"unknown parameter {k!r}")
            setattr(self, k, v)
        self._init_params()
        return self

    def fit(self, X, y, epochs=10, adversarial=False, epsilon_schedule=None,
            threat=None):
        config = TrainConfig(
            epochs=epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, seed=self.seed,
            adversarial=adversarial, epsilon_schedule=epsilon_schedule,
            threat=threat,
        )
        _, history = train(self, (np.asarray(X, dtype=np.float64), y), config)
        self.history_ = history
        return self


class LinearSoftmaxClassifier(_ClassifierBase):
    """Softmax regression on raw pixels. Parameters start at zero, so a
    freshly built model emits all-zero logits."""

    architecture = "linear-softmax"
    _param_names = ("input_shape", "num_classes", "learning_rate",
                    "batch_size", "seed")

    def __init__(self, input_shape=(28, 28), num_classes=10,
                 learning_rate=0.1, batch_size=64, seed=0):
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed
        self._init_params()

    def _init_params(self):
        d = int(np.prod(self.input_shape))
        self.params_ = {
            "weight": np.zeros((self.num_classes, d)),
            "bias": np.zeros(self.num_classes),
        }

    def _forward(self, batch):
        flat = batch.reshape(len(batch), -1)
        logits = flat @ self.params_["weight"].T + self.params_["bias"]
        return logits, flat

    def _backward_input(self, dlogits, cache):
        dflat = dlogits @ self.params_["weight"]
        return dflat.reshape((len(dlogits),) + self.input_shape)

    def _param_gradients(self, batch, labels):
        logits, flat = self._forward(batch)
        b = len(batch)
        loss = float(_cross_entropy_rows(logits, labels).mean())
        dlogits = _softmax_rows(logits)
        dlogits[np.arange(b), labels] -= 1.0
        dlogits /= b
        return loss, {
            "weight": dlogits.T @ flat,
            "bias": dlogits.sum(axis=0),
        }


def _conv_same(x, kernel):
    """3x3 same-padding correlation; x (b, c, h, w), kernel (o, c, 3, 3)."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h * w, c * 9)
    out = cols @ kernel.reshape(kernel.shape[0], -1).T
    return out.transpose(0, 2, 1).reshape(b, kernel.shape[0], h, w), cols


def _conv_same_backward(dout, cols, kernel, x_shape):
    """Gradients of _conv_same: returns (dx, dkernel)."""
    b, c, h, w = x_shape
    o = kernel.shape[0]
    k = cols.shape[2]
    dflat = dout.reshape(b, o, h * w).transpose(0, 2, 1).reshape(-1, o)
    dkernel = (dflat.T @ cols.reshape(-1, k)).reshape(kernel.shape)
    dxp = np.zeros((b, c, h + 2, w + 2))
    for di in range(3):
        for dj in range(3):
            contrib = np.tensordot(dout, kernel[:, :, di, dj],
                                   axes=([1], [0]))
            dxp[:, :, di:di + h, dj:dj + w] += contrib.transpose(0, 3, 1, 2)
    return dxp[:, :, 1:1 + h, 1:1 + w], dkernel


def _avgpool2(x):
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    t = x[:, :, : 2 * h2, : 2 * w2]
    return t.reshape(b, c, h2, 2, w2, 2).mean(axis=(3, 5))


def _avgpool2_backward(dout, x_shape):
    b, c, h, w = x_shape
    h2, w2 = h // 2, w // 2
    dx = np.zeros(x_shape)
    up = np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) / 4.0
    dx[:, :, : 2 * h2, : 2 * w2] = up
    return dx


class ConvSmallClassifier(_ClassifierBase):
    """Two 3x3 tanh convolutions (16, 32 channels) with 2x average pooling
    after each, a 128-unit tanh dense layer, and a softmax head.

    Average pooling keeps the input gradient smooth, which the
    finite-difference gradient gate and distribution-space attack steps both
    rely on; weights start at seeded scaled-uniform values.
    """

    architecture = "conv-small"
    _param_names = ("input_shape", "num_classes", "learning_rate",
                    "batch_size", "seed", "hidden")

    def __init__(self, input_shape=(28, 28), num_classes=10,
                 learning_rate=0.05, batch_size=64, seed=0, hidden=128):
        if len(input_shape) not in (2, 3):
            raise DimensionMismatch("input_shape must be (h, w) or (h, w, c)")
        if input_shape[0] < 4 or input_shape[1] < 4:
            raise DimensionMismatch("conv-small needs at least a 4x4 grid")
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed
        self.hidden = hidden
        self._init_params()

    @property
    def _channels(self):
        return self.input_shape[2] if len(self.input_shape) == 3 else 1

    def _init_params(self):
        rng = np.random.default_rng(self.seed)
        c = self._channels
        h, w = self.input_shape[0], self.input_shape[1]
        f = 32 * (h // 2 // 2) * (w // 2 // 2)
        self._flat_features = f

        def u(shape, fan_in):
            s = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-s, s, size=shape)

        self.params_ = {
            "conv1_w": u((16, c, 3, 3), 9 * c),
            "conv1_b": np.zeros(16),
            "conv2_w": u((32, 16, 3, 3), 9 * 16),
            "conv2_b": np.zeros(32),
            "dense1_w": u((self.hidden, f), f),
            "dense1_b": np.zeros(self.hidden),
            "dense2_w": u((self.num_classes, self.hidden), self.hidden),
            "dense2_b": np.zeros(self.num_classes),
        }

    def _to_cf(self, batch):
        if len(self.input_shape) == 3:
            return np.moveaxis(batch, 3, 1)
        return batch[:, None, :, :]

    def _from_cf(self, batch):
        if len(self.input_shape) == 3:
            return np.moveaxis(batch, 1, 3)
        return batch[:, 0]

    def _forward(self, batch):
        p = self.params_
        x0 = self._to_cf(batch)
        z1, cols1 = _conv_same(x0, p["conv1_w"])
        z1 += p["conv1_b"][None, :, None, None]
        a1 = np.tanh(z1)
        p1 = _avgpool2(a1)
        z2, cols2 = _conv_same(p1, p["conv2_w"])
        z2 += p["conv2_b"][None, :, None, None]
        a2 = np.tanh(z2)
        p2 = _avgpool2(a2)
        flat = p2.reshape(len(batch), -1)
        z3 = flat @ p["dense1_w"].T + p["dense1_b"]
        a3 = np.tanh(z3)
        logits = a3 @ p["dense2_w"].T + p["dense2_b"]
        cache = (x0, cols1, a1, p1, cols2, a2, p2, flat, a3)
        return logits, cache

    def _backward(self, dlogits, cache):
        """Common backward pass; returns (dx, param gradient dict)."""
        p = self.params_
        x0, cols1, a1, p1, cols2, a2, p2, flat, a3 = cache
        grads = {}
        grads["dense2_w"] = dlogits.T @ a3
        grads["dense2_b"] = dlogits.sum(axis=0)
        da3 = dlogits @ p["dense2_w"]
        dz3 = da3 * (1.0 - a3 ** 2)
        grads["dense1_w"] = dz3.T @ flat
        grads["dense1_b"] = dz3.sum(axis=0)
        dflat = dz3 @ p["dense1_w"]
        dp2 = dflat.reshape(p2.shape)
        da2 = _avgpool2_backward(dp2, a2.shape)
        dz2 = da2 * (1.0 - a2 ** 2)
        grads["conv2_b"] = dz2.sum(axis=(0, 2, 3))
        dp1, grads["conv2_w"] = _conv_same_backward(
            dz2, cols2, p["conv2_w"], p1.shape)
        da1 = _avgpool2_backward(dp1, a1.shape)
        dz1 = da1 * (1.0 - a1 ** 2)
        grads["conv1_b"] = dz1.sum(axis=(0, 2, 3))
        dx0, grads["conv1_w"] = _conv_same_backward(
            dz1, cols1, p["conv1_w"], x0.shape)
        return self._from_cf(dx0), grads

    def _backward_input(self, dlogits, cache):
        return self._backward(dlogits, cache)[0]

    def _param_gradients(self, batch, labels):
        logits, cache = self._forward(batch)
        b = len(batch)
        loss = float(_cross_entropy_rows(logits, labels).mean())
        dlogits = _softmax_rows(logits)
        dlogits[np.arange(b), labels] -= 1.0
        dlogits /= b
        _, grads = self._backward(dlogits, cache)
        return loss, grads


_ARCHITECTURES = {
    "linear-softmax": LinearSoftmaxClassifier,
    "conv-small": ConvSmallClassifier,
}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def epsilon_schedule(epochs, start=0.1, end=10.0):
    """Geometric radius ramp from start to end inclusive, one per epoch."""
    if epochs < 2:
        raise ValueError("a schedule needs at least 2 epochs")
    if start <= 0 or end <= 0:
        raise ValueError("schedule endpoints must be positive")
    return list(np.geomspace(start, end, epochs))


def default_training_threat(epsilon=1.0):
    """Transport threat tuned for the training loop: the more lenient
    termination thresholds, softer smoothing, 40 steps, no early stop."""
    return ThreatModel(
        kind="wasserstein", epsilon=epsilon, step_kind="linf_sign",
        max_steps=40, early_stop=False, lam=DEFAULT_LAM_TRAINING,
        limits=TRAINING_LIMITS,
    )


@dataclass
class TrainConfig:
    """Knobs of one training run; learning_rate None means the classifier's
    own default. For adversarial runs epsilon_schedule must list one radius
    per epoch (normalized-mass units) and threat, when given, acts as the
    template whose epsilon the schedule overrides."""

    epochs: int
    batch_size: int = 64
    learning_rate: "float | None" = None
    seed: int = 0
    adversarial: bool = False
    epsilon_schedule: "list | None" = None
    threat: "ThreatModel | None" = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.adversarial:
            if self.epsilon_schedule is None:
                raise ValueError("adversarial training needs a schedule")
            if len(self.epsilon_schedule) != self.epochs:
                raise ValueError(
                    f"schedule lists {len(self.epsilon_schedule)} radii "
                    f"for {self.epochs} epochs"
                )


def train(classifier, dataset, config):
    """Mini-batch gradient descent; returns (classifier, history).

    history holds one record per epoch: epoch index, mean training loss,
    clean accuracy on the training set, and the attack radius (None for
    standard epochs). Zero epochs leave the parameters untouched.
    """
    X, y = dataset
    X = np.asarray(X, dtype=np.float64)
    y = as_labels(y, len(X))
    if len(X) == 0:
        raise ValueError("empty dataset")
    history = []
    if config.epochs == 0:
        return classifier, history
    rng = np.random.default_rng(config.seed)
    lr = config.learning_rate
    if lr is None:
        lr = classifier.learning_rate

    threat = config.threat
    cost = None
    if config.adversarial:
        if threat is None:
            threat = default_training_threat()
        from .attacks import _grid_cost

        cost = _grid_cost(X.shape[1], X.shape[2], threat)

    for epoch in range(config.epochs):
        eps = None
        if config.adversarial:
            eps = float(config.epsilon_schedule[epoch])
        order = rng.permutation(len(X))
        losses = []
        for lo in range(0, len(X), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            batch, labels = X[idx], y[idx]
            if config.adversarial and eps > 0:
                tk = replace(threat, epsilon=eps)
                batch = attack_batch(
                    classifier, batch, labels, tk, cost=cost)[0]
            loss, grads = classifier._param_gradients(batch, labels)
            losses.append(loss)
            for name, g in grads.items():
                classifier.params_[name] -= lr * g
        history.append({
            "epoch": epoch,
            "mean_loss": float(np.mean(losses)),
            "clean_accuracy": classifier.score(X, y),
            "epsilon": eps,
        })
    return classifier, history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(classifier, path):
    """Write the versioned binary container described in the module notes."""
    arch = classifier.architecture.encode()
    dims = tuple(classifier.input_shape)
    parts = [
        _MAGIC,
        struct.pack("<H", _VERSION),
        struct.pack("<H", len(arch)), arch,
        struct.pack("<B", len(dims)),
        struct.pack(f"<{len(dims)}I", *dims),
        struct.pack("<H", classifier.num_classes),
        struct.pack("<H", len(classifier.params_)),
    ]
    payload = []
    for name, value in classifier.params_.items():
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        payload.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    blob = b"".join(parts) + b"".join(payload)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                               suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CheckpointFormatError("checkpoint ends mid-field")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """Rebuild a classifier from a checkpoint file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    rd = _Reader(blob)
    if rd.take(len(_MAGIC)) != _MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    (version,) = rd.unpack("<H")
    if version != _VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (tag_len,) = rd.unpack("<H")
    arch = rd.take(tag_len).decode()
    if arch not in _ARCHITECTURES:
        raise CheckpointFormatError(f"unknown architecture tag {arch!r}")
    (nd,) = rd.unpack("<B")
    dims = rd.unpack(f"<{nd}I")
    (num_classes,) = rd.unpack("<H")
    (n_params,) = rd.unpack("<H")
    table = []
    for _ in range(n_params):
        (name_len,) = rd.unpack("<H")
        name = rd.take(name_len).decode()
        (ndim,) = rd.unpack("<B")
        shape = rd.unpack(f"<{ndim}I")
        table.append((name, shape))
    kwargs = {"input_shape": dims, "num_classes": num_classes}
    if arch == "conv-small":
        hidden = dict(table).get("dense1_w")
        if hidden:
            kwargs["hidden"] = int(hidden[0])
    model = _ARCHITECTURES[arch](**kwargs)
    expected = set(model.params_)
    got = {name for name, _ in table}
    if expected != got:
        raise CheckpointFormatError(
            f"parameter table mismatch: {sorted(got ^ expected)}"
        )
    for name, shape in table:
        count = int(np.prod(shape)) if shape else 1
        raw = rd.take(4 * count)
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        if model.params_[name].shape != tuple(shape):
            raise CheckpointFormatError(
                f"parameter {name} has shape {shape}, expected "
                f"{model.params_[name].shape}"
            )
        model.params_[name] = arr.reshape(shape)
    if rd.pos != len(blob):
        raise CheckpointFormatError("trailing bytes after payload")
    return model
