"""Differentiable classifiers behind a predict-only interface.

Networks are plain float64 numpy with explicit reverse-mode gradients.
``predict`` runs on the chunk-invariant contraction path (see
``linalg.stable_matmul``) so that results are bitwise identical whether a
batch is evaluated in one call or split across service requests; training
and attack gradients use regular BLAS.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .linalg import as_matrix, as_vector, assert_finite, stable_matmul
from .rng import SeededRng

CHECKPOINT_MAGIC = b"BSCP"
CHECKPOINT_VERSION = 1
PROB_CLAMP = 1e-12


class CheckpointError(ValueError):
    """Checkpoint container is malformed or of an unsupported version."""


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss(probs: np.ndarray, labels) -> float:
    """Mean negative log probability of the true class over the batch.

    Probabilities are clamped below at 1e-12 before the log so a confident
    wrong prediction yields a large finite loss instead of infinity.
    """
    p = as_matrix(probs, "probs")
    y = np.asarray(labels, dtype=np.int64)
    if y.ndim != 1 or y.shape[0] != p.shape[0]:
        raise ValueError(f"labels must be a vector of length {p.shape[0]}")
    if y.size and (y.min() < 0 or y.max() >= p.shape[1]):
        raise ValueError(f"labels must lie in [0, {p.shape[1]})")
    picked = p[np.arange(p.shape[0]), y]
    return float(-np.mean(np.log(np.maximum(picked, PROB_CLAMP))))


class BlackBoxModel:
    """The predict-only surface every scored model implements.

    predict maps a b-by-d batch to b rows of class probabilities; it must be
    deterministic and, for built-in models, safe to call concurrently.
    """

    model_id: str = "model"
    input_dim: int = 0
    num_classes: int = 0
    concurrency_safe: bool = False

    def predict(self, batch) -> np.ndarray:
        raise NotImplementedError

    def _check_batch(self, batch) -> np.ndarray:
        x = as_matrix(batch, "batch")
        if x.shape[1] != self.input_dim:
            raise ValueError(
                f"batch has {x.shape[1]} columns, model expects {self.input_dim}"
            )
        return x


class DifferentiableModel(BlackBoxModel):
    """Adds loss gradients w.r.t. the input, required by attacks and training."""

    parameters: list = []

    def input_gradient(self, batch, labels) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class ArchitectureSpec:
    """Shape description for the built-in networks.

    kind is one of linear / mlp / cnn. Hidden activations are ReLU and the
    output is always a softmax. cnn uses 3x3 valid convolutions, each
    followed by 2x2 max-pooling, then the dense widths in ``hidden``.
    """

    kind: str
    input_dim: int
    num_classes: int
    hidden: tuple = ()
    conv_channels: tuple = ()
    image_shape: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "mlp", "cnn"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if self.image_shape is not None:
            object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("input_dim must be >= 1 and num_classes >= 2")
        if self.kind == "linear" and (self.hidden or self.conv_channels):
            raise ValueError("linear models take no hidden or conv sizes")
        if self.kind == "mlp" and (not self.hidden or self.conv_channels):
            raise ValueError("mlp needs hidden widths and no conv channels")
        if self.kind == "cnn":
            if not self.conv_channels:
                raise ValueError("cnn needs at least one conv channel count")
            if self.image_shape is None:
                raise ValueError("cnn needs an image_shape")
            h, w, c = self.image_shape
            if h * w * c != self.input_dim:
                raise ValueError(
                    f"image_shape {self.image_shape} inconsistent with input_dim {self.input_dim}"
                )

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "hidden": list(self.hidden),
            "conv_channels": list(self.conv_channels),
            "image_shape": list(self.image_shape) if self.image_shape else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(
            kind=d["kind"],
            input_dim=int(d["input_dim"]),
            num_classes=int(d["num_classes"]),
            hidden=tuple(d.get("hidden") or ()),
            conv_channels=tuple(d.get("conv_channels") or ()),
            image_shape=tuple(d["image_shape"]) if d.get("image_shape") else None,
        )


def linear_spec(input_dim: int, num_classes: int) -> ArchitectureSpec:
    return ArchitectureSpec("linear", input_dim, num_classes)


def mlp_spec(input_dim: int = 784, num_classes: int = 10, hidden=(256,)) -> ArchitectureSpec:
    return ArchitectureSpec("mlp", input_dim, num_classes, hidden=tuple(hidden))


def cnn3_spec(image_shape=(28, 28, 1), num_classes: int = 10) -> ArchitectureSpec:
    h, w, c = image_shape
    return ArchitectureSpec("cnn", h * w * c, num_classes,
                            conv_channels=(16, 32), image_shape=tuple(image_shape))


def cnn5_spec(image_shape=(28, 28, 1), num_classes: int = 10) -> ArchitectureSpec:
    h, w, c = image_shape
    return ArchitectureSpec("cnn", h * w * c, num_classes, hidden=(128,),
                            conv_channels=(16, 32, 64), image_shape=tuple(image_shape))


# ---------------------------------------------------------------------------
# layers


class _Dense:
    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w = w  # (in, out)
        self.b = b  # (out,)

    @property
    def params(self):
        return [self.w, self.b]

    def forward(self, x, stable=False):
        y = (stable_matmul(x, self.w) if stable else x @ self.w) + self.b
        return y, x

    def backward(self, dy, x):
        return dy @ self.w.T, [x.T @ dy, dy.sum(axis=0)]


class _ReLU:
    params: list = []

    def forward(self, x, stable=False):
        return np.maximum(x, 0.0), x > 0.0

    def backward(self, dy, mask):
        return dy * mask, []


class _Reshape:
    """(b, d) rows to NCHW image tensors at the front of a conv stack."""

    params: list = []

    def __init__(self, image_shape):
        h, w, c = image_shape
        self.chw = (c, h, w)

    def forward(self, x, stable=False):
        b = x.shape[0]
        h, w, c = self.chw[1], self.chw[2], self.chw[0]
        # rows are stored height x width x channels
        return x.reshape(b, h, w, c).transpose(0, 3, 1, 2), None

    def backward(self, dy, _):
        b = dy.shape[0]
        return dy.transpose(0, 2, 3, 1).reshape(b, -1), []


class _Flatten:
    params: list = []

    def forward(self, x, stable=False):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape):
        return dy.reshape(shape), []


class _Conv2D:
    """3x3 valid convolution, stride 1, via im2col and one matmul."""

    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w = w  # (oc, ic, kh, kw)
        self.b = b  # (oc,)

    @property
    def params(self):
        return [self.w, self.b]

    def forward(self, x, stable=False):
        oc, ic, kh, kw = self.w.shape
        b, _, h, w = x.shape
        oh, ow = h - kh + 1, w - kw + 1
        cols = np.empty((b, ic, kh, kw, oh, ow), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = x[:, :, i:i + oh, j:j + ow]
        cols2 = cols.reshape(b, ic * kh * kw, oh * ow).transpose(0, 2, 1)
        cols2 = np.ascontiguousarray(cols2).reshape(b * oh * ow, ic * kh * kw)
        wm = self.w.reshape(oc, -1)
        out = (stable_matmul(cols2, wm.T) if stable else cols2 @ wm.T) + self.b
        y = out.reshape(b, oh, ow, oc).transpose(0, 3, 1, 2)
        return y, (cols2, x.shape, (oh, ow))

    def backward(self, dy, cache):
        cols2, x_shape, (oh, ow) = cache
        oc, ic, kh, kw = self.w.shape
        b = x_shape[0]
        dy2 = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(b * oh * ow, oc)
        dw = (dy2.T @ cols2).reshape(self.w.shape)
        db = dy2.sum(axis=0)
        dcols2 = dy2 @ self.w.reshape(oc, -1)
        dcols = dcols2.reshape(b, oh * ow, ic * kh * kw).transpose(0, 2, 1)
        dcols = dcols.reshape(b, ic, kh, kw, oh, ow)
        dx = np.zeros(x_shape, dtype=dy.dtype)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + oh, j:j + ow] += dcols[:, :, i, j]
        return dx, [dw, db]


class _MaxPool2:
    """2x2 max-pool, stride 2; trailing odd rows/columns are dropped."""

    params: list = []

    def forward(self, x, stable=False):
        b, c, h, w = x.shape
        ph, pw = h // 2, w // 2
        xr = x[:, :, :2 * ph, :2 * pw].reshape(b, c, ph, 2, pw, 2)
        xr = np.ascontiguousarray(xr.transpose(0, 1, 2, 4, 3, 5)).reshape(b, c, ph, pw, 4)
        idx = xr.argmax(axis=-1)
        y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, dy, cache):
        idx, x_shape = cache
        b, c, h, w = x_shape
        ph, pw = h // 2, w // 2
        dxr = np.zeros((b, c, ph, pw, 4), dtype=dy.dtype)
        np.put_along_axis(dxr, idx[..., None], dy[..., None], axis=-1)
        dxr = dxr.reshape(b, c, ph, pw, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(x_shape, dtype=dy.dtype)
        dx[:, :, :2 * ph, :2 * pw] = dxr.reshape(b, c, 2 * ph, 2 * pw)
        return dx, []


def _build_layers(spec: ArchitectureSpec, rng: SeededRng):
    layers = []
    if spec.kind == "cnn":
        h, w, c = spec.image_shape
        layers.append(_Reshape(spec.image_shape))
        in_ch, fh, fw = c, h, w
        for oc in spec.conv_channels:
            fan_in = in_ch * 9
            wk = rng.standard_normal((oc, in_ch, 3, 3)) * np.sqrt(2.0 / fan_in)
            layers.append(_Conv2D(wk, np.zeros(oc)))
            layers.append(_ReLU())
            layers.append(_MaxPool2())
            fh, fw = (fh - 2) // 2, (fw - 2) // 2
            in_ch = oc
            if fh < 1 or fw < 1:
                raise ValueError("image too small for the conv stack")
        layers.append(_Flatten())
        width = in_ch * fh * fw
    else:
        width = spec.input_dim
    for hdim in spec.hidden:
        wk = rng.standard_normal((width, hdim)) * np.sqrt(2.0 / width)
        layers.append(_Dense(wk, np.zeros(hdim)))
        layers.append(_ReLU())
        width = hdim
    wk = rng.standard_normal((width, spec.num_classes)) * np.sqrt(1.0 / width)
    layers.append(_Dense(wk, np.zeros(spec.num_classes)))
    return layers


class NetworkModel(DifferentiableModel):
    """Feed-forward classifier with explicit forward and reverse passes."""

    concurrency_safe = True

    def __init__(self, spec: ArchitectureSpec, rng: SeededRng | None = None,
                 params: list | None = None, model_id: str = "network",
                 meta: dict | None = None):
        self.spec = spec
        self.input_dim = spec.input_dim
        self.num_classes = spec.num_classes
        self.model_id = model_id
        self.meta = dict(meta or {})
        self.layers = _build_layers(spec, rng or SeededRng(0))
        if params is not None:
            own = self.parameters
            if len(params) != len(own):
                raise ValueError(f"expected {len(own)} parameter arrays, got {len(params)}")
            for slot, given in zip(own, params):
                arr = np.ascontiguousarray(given, dtype=np.float64)
                if arr.shape != slot.shape:
                    raise ValueError(f"parameter shape {arr.shape} != expected {slot.shape}")
                slot[...] = arr

    @property
    def parameters(self) -> list:
        return [p for layer in self.layers for p in layer.params]

    def logits(self, batch, stable=False) -> np.ndarray:
        x = self._check_batch(batch)
        for layer in self.layers:
            x, _ = layer.forward(x, stable=stable)
        return x

    def predict(self, batch) -> np.ndarray:
        probs = softmax(self.logits(batch, stable=True))
        assert_finite(probs, "predicted probabilities")
        return probs

    def _forward_cached(self, x):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def _backward(self, dlogits, caches, want_param_grads=True):
        grads = [None] * len(self.layers)
        dy = dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            dy, g = self.layers[i].backward(dy, caches[i])
            if want_param_grads:
                grads[i] = g
        flat = [g for gl in grads for g in (gl or [])] if want_param_grads else None
        return dy, flat

    def input_gradient(self, batch, labels) -> np.ndarray:
        """Per-sample gradient of that sample's cross-entropy loss w.r.t. its input.

        No batch averaging: row i holds d(-log p_{y_i}(x_i))/dx_i. Mini-batch
        training applies the 1/b factor separately.
        """
        x = self._check_batch(batch)
        y = self._check_labels(labels, x.shape[0])
        logits, caches = self._forward_cached(x)
        dlogits = softmax(logits)
        dlogits[np.arange(x.shape[0]), y] -= 1.0
        dx, _ = self._backward(dlogits, caches, want_param_grads=False)
        return dx

    def loss_and_grads(self, batch, labels):
        """Mean cross-entropy, parameter gradients, and the batch probabilities."""
        x = self._check_batch(batch)
        y = self._check_labels(labels, x.shape[0])
        logits, caches = self._forward_cached(x)
        probs = softmax(logits)
        loss = cross_entropy_loss(probs, y)
        dlogits = probs.copy()
        dlogits[np.arange(x.shape[0]), y] -= 1.0
        dlogits /= x.shape[0]
        _, grads = self._backward(dlogits, caches)
        return loss, grads, probs

    def _check_labels(self, labels, b):
        y = np.asarray(labels, dtype=np.int64)
        if y.shape != (b,):
            raise ValueError(f"labels must have shape ({b},), got {y.shape}")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        return y


def predict(model: BlackBoxModel, batch) -> np.ndarray:
    return model.predict(batch)


def input_gradient(model: DifferentiableModel, batch, labels) -> np.ndarray:
    return model.input_gradient(batch, labels)


def linear_oracle_model(W, b, model_id: str = "linear-oracle") -> NetworkModel:
    """softmax(Wx + b) with the given c-by-d weights; raw logits stay exactly Wx + b."""
    W = as_matrix(W, "W")
    b = as_vector(b, "b")
    c, d = W.shape
    if b.shape[0] != c:
        raise ValueError(f"b must have length {c}, got {b.shape[0]}")
    return NetworkModel(linear_spec(d, c), params=[W.T.copy(), b.copy()],
                        model_id=model_id)


class RawLinearOracle(BlackBoxModel):
    """Two-column probe whose first output column is exactly w . x + b.

    The complement column keeps each row summing to one; entries may leave
    [0, 1] by construction. Exists so surrogate fits can be checked against
    known coefficients without a softmax in the way.
    """

    concurrency_safe = True

    def __init__(self, w, b: float = 0.0, model_id: str = "raw-linear-oracle"):
        self.w = as_vector(w, "w")
        self.b = float(b)
        self.input_dim = self.w.shape[0]
        self.num_classes = 2
        self.model_id = model_id

    def predict(self, batch) -> np.ndarray:
        x = self._check_batch(batch)
        g = np.einsum("ij,j->i", x, self.w, optimize=False) + self.b
        return np.stack([g, 1.0 - g], axis=1)


class ConstantModel(DifferentiableModel):
    """Returns one fixed probability row for every input; gradients are zero."""

    concurrency_safe = True
    parameters: list = []

    def __init__(self, probs_row, input_dim: int, model_id: str = "constant"):
        row = as_vector(probs_row, "probs_row")
        if np.any(row < 0) or abs(row.sum() - 1.0) > 1e-6:
            raise ValueError("probs_row must be a probability vector")
        self.row = row
        self.input_dim = int(input_dim)
        self.num_classes = row.shape[0]
        self.model_id = model_id

    def predict(self, batch) -> np.ndarray:
        x = self._check_batch(batch)
        return np.tile(self.row, (x.shape[0], 1))

    def input_gradient(self, batch, labels) -> np.ndarray:
        x = self._check_batch(batch)
        return np.zeros_like(x)


# ---------------------------------------------------------------------------
# training


class Adam:
    """Adam with the usual defaults; state arrays mirror the parameter list."""

    def __init__(self, params: list, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list, grads: list, learning_rate: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p -= learning_rate * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainingLog:
    model_id: str
    epochs: list = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1]["accuracy"] if self.epochs else float("nan")

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "epochs": self.epochs}


def train(model: NetworkModel, dataset, epochs: int, learning_rate: float = 1e-3,
          batch_size: int = 32, rng: SeededRng | None = None,
          batch_transform=None) -> TrainingLog:
    """Mini-batch Adam over shuffled epochs; bit-reproducible for a fixed seed.

    ``batch_transform(xb, yb, epoch, batch_index) -> xb`` lets adversarial
    training swap each batch for a perturbed counterpart before the step;
    the shuffle stream is not consumed by the transform, so a transform that
    returns its input unchanged reproduces plain training exactly.
    """
    if dataset.labels is None:
        raise ValueError("training requires a labeled dataset")
    if epochs < 0 or batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch_size >= 1")
    rng = rng or SeededRng(0)
    opt = Adam(model.parameters)
    log = TrainingLog(model_id=model.model_id)
    x_all, y_all = dataset.features, dataset.labels
    n = dataset.n
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total_loss = 0.0
        total_clean = 0.0
        correct = 0
        for bi, start in enumerate(range(0, n, batch_size)):
            idx = perm[start:start + batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if batch_transform is not None:
                total_clean += cross_entropy_loss(
                    softmax(model.logits(xb)), yb) * len(idx)
                xb = batch_transform(xb, yb, epoch, bi)
            loss, grads, probs = model.loss_and_grads(xb, yb)
            opt.step(model.parameters, grads, learning_rate)
            total_loss += loss * len(idx)
            correct += int(np.sum(probs.argmax(axis=1) == yb))
        entry = {
            "epoch": epoch,
            "mean_loss": total_loss / n,
            "accuracy": correct / n,
        }
        if batch_transform is not None:
            entry["mean_clean_loss"] = total_clean / n
        log.epochs.append(entry)
    return log


def evaluate_accuracy(model: BlackBoxModel, dataset) -> float:
    if dataset.labels is None:
        raise ValueError("accuracy requires a labeled dataset")
    preds = model.predict(dataset.features).argmax(axis=1)
    return float(np.mean(preds == dataset.labels))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: NetworkModel, path, meta: dict | None = None) -> None:
    """Self-describing container: spec + parameters as little-endian float64.

    save -> load -> save round-trips to identical bytes; the header JSON is
    canonicalized (sorted keys) and parameters are raw C-order blobs.
    """
    params = model.parameters
    header = {
        "arch": model.spec.to_dict(),
        "meta": dict(meta if meta is not None else model.meta),
        "model_id": model.model_id,
        "param_shapes": [list(p.shape) for p in params],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path) -> NetworkModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        spec = ArchitectureSpec.from_dict(header["arch"])
        shapes = [tuple(s) for s in header["param_shapes"]]
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad header ({exc})") from exc
    offset = 12 + hlen
    params = []
    for shape in shapes:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated parameter payload")
        params.append(np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).copy())
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return NetworkModel(spec, params=params, model_id=header["model_id"],
                        meta=header.get("meta") or {})
