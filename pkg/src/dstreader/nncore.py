"""Minimal deterministic neural-network core with exact manual gradients.

Everything is float64 numpy.  Layers come in forward/backward pairs whose
gradients are exact (verifiable against central finite differences); the
optimizer is standard bias-corrected Adam applied in a fixed parameter
order, so a fixed seed yields bit-identical training trajectories.

Batching convention: operations accept a leading batch axis.  Sequence ops
take right-padded (B, L, D) arrays; padded steps produce values that are
never read and receive zero upstream gradient, so no masking is needed
inside the recurrence.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"DSTC"
CHECKPOINT_VERSION = 1

INIT_SCALE = 0.1  # all parameters start uniform(-0.1, 0.1)


class ShapeError(ValueError):
    """Operand shapes do not agree."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or incompatible."""


class Parameter:
    """A named float64 tensor with an accumulated gradient of equal shape."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def init_param(rng: np.random.Generator, name: str, shape: tuple[int, ...]) -> Parameter:
    return Parameter(name, rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape))


def zero_grads(params: list[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign to avoid overflow in exp.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Affine


def affine_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y = xW + b over the trailing axis; leading axes are batch."""
    if x.shape[-1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ShapeError(f"affine: x{x.shape} W{W.shape} b{b.shape}")
    return x @ W + b


def affine_backward(
    dy: np.ndarray, x: np.ndarray, W: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of y = xW + b w.r.t. x, W, b for upstream dy."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dx = (dy2 @ W.T).reshape(x.shape)
    dW = x2.T @ dy2
    db = dy2.sum(axis=0)
    return dx, dW, db


# ---------------------------------------------------------------------------
# Bilinear form


def bilinear(d: np.ndarray, theta: np.ndarray, q: np.ndarray) -> float:
    """dᵀ Θ q for vectors d (h,), q (k,) and matrix Θ (h, k)."""
    if d.shape != (theta.shape[0],) or q.shape != (theta.shape[1],):
        raise ShapeError(f"bilinear: d{d.shape} theta{theta.shape} q{q.shape}")
    return float(d @ theta @ q)


def bilinear_backward(
    ds: float, d: np.ndarray, theta: np.ndarray, q: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dd = ds * (theta @ q)
    dtheta = ds * np.outer(d, q)
    dq = ds * (theta.T @ d)
    return dd, dtheta, dq


# ---------------------------------------------------------------------------
# LSTM

# Gate layout in the fused 4H matrices: input, forget, output, candidate.


@dataclass
class LSTMStepCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray
    c: np.ndarray
    tc: np.ndarray


class LSTMCell:
    """Single LSTM cell (fused gate weights) with exact step-level backward."""

    def __init__(self, prefix: str, in_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.Wx = init_param(rng, f"{prefix}.Wx", (in_dim, 4 * hidden_dim))
        self.Wh = init_param(rng, f"{prefix}.Wh", (hidden_dim, 4 * hidden_dim))
        self.b = init_param(rng, f"{prefix}.b", (4 * hidden_dim,))

    def parameters(self) -> list[Parameter]:
        return [self.Wx, self.Wh, self.b]

    def step(
        self, x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, LSTMStepCache]:
        """One timestep on a (B, in_dim) batch; returns (h, c, cache)."""
        if x.shape[-1] != self.in_dim or h_prev.shape[-1] != self.hidden_dim:
            raise ShapeError(f"lstm step: x{x.shape} h{h_prev.shape}")
        H = self.hidden_dim
        z = x @ self.Wx.value + h_prev @ self.Wh.value + self.b.value
        i = sigmoid(z[..., :H])
        f = sigmoid(z[..., H : 2 * H])
        o = sigmoid(z[..., 2 * H : 3 * H])
        g = np.tanh(z[..., 3 * H :])
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        return h, c, LSTMStepCache(x, h_prev, c_prev, i, f, o, g, c, tc)

    def step_backward(
        self, dh: np.ndarray, dc: np.ndarray, cache: LSTMStepCache
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Backward through one step; accumulates weight gradients and
        returns (dx, dh_prev, dc_prev)."""
        i, f, o, g, tc = cache.i, cache.f, cache.o, cache.g, cache.tc
        do = tc * dh
        dc_total = dc + o * (1.0 - tc * tc) * dh
        df = dc_total * cache.c_prev
        dc_prev = dc_total * f
        di = dc_total * g
        dg = dc_total * i
        dz = np.concatenate(
            [
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                do * o * (1.0 - o),
                dg * (1.0 - g * g),
            ],
            axis=-1,
        )
        dx = dz @ self.Wx.value.T
        dh_prev = dz @ self.Wh.value.T
        x2 = cache.x.reshape(-1, self.in_dim)
        h2 = cache.h_prev.reshape(-1, self.hidden_dim)
        dz2 = dz.reshape(-1, 4 * self.hidden_dim)
        self.Wx.grad += x2.T @ dz2
        self.Wh.grad += h2.T @ dz2
        self.b.grad += dz2.sum(axis=0)
        return dx, dh_prev, dc_prev

    def forward(self, X: np.ndarray) -> tuple[np.ndarray, list[LSTMStepCache]]:
        """Run over a right-padded (B, L, in_dim) batch from zero state.

        Outputs at padded positions are meaningless; callers must not read
        them and must pass zero upstream gradient there.
        """
        B, L, _ = X.shape
        H = self.hidden_dim
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        outs = np.empty((B, L, H))
        caches = []
        for t in range(L):
            h, c, cache = self.step(X[:, t, :], h, c)
            outs[:, t, :] = h
            caches.append(cache)
        return outs, caches

    def backward(self, dH: np.ndarray, caches: list[LSTMStepCache]) -> np.ndarray:
        """BPTT over a sequence; dH is (B, L, hidden), zero at padding."""
        B, L, H = dH.shape
        dX = np.empty((B, L, self.in_dim))
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        for t in range(L - 1, -1, -1):
            dx, dh, dc = self.step_backward(dH[:, t, :] + dh, dc, caches[t])
            dX[:, t, :] = dx
        return dX


# ---------------------------------------------------------------------------
# Losses


def sigmoid_bce_loss(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over all elements, computed from logits.

    loss_i = max(z,0) - z*y + log(1 + exp(-|z|)); dloss/dz = (σ(z) - y)/n.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.shape != labels.shape:
        raise ShapeError(f"bce: logits{logits.shape} labels{labels.shape}")
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise ValueError("bce labels must be 0 or 1")
    z = logits
    per = np.maximum(z, 0.0) - z * labels + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    dlogits = (sigmoid(z) - labels) / n
    return float(per.sum() / n), dlogits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_ce_loss(logits: np.ndarray, label_index: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of a single distribution; dlogits = softmax - onehot."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ShapeError("softmax_ce_loss expects a 1-d logit vector")
    if not 0 <= label_index < logits.shape[0]:
        raise ValueError(f"label index {label_index} out of range")
    logp = log_softmax(logits)
    dlogits = np.exp(logp)
    dlogits[label_index] -= 1.0
    return float(-logp[label_index]), dlogits


def softmax_ce_batch(
    logits: np.ndarray, labels: np.ndarray, mask: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a (B, C) batch with integer labels (B,).

    ``mask`` (B, C) restricts each row's class set; masked-out logits are
    treated as -inf (zero probability, zero gradient).
    """
    logits = np.asarray(logits, dtype=np.float64)
    B = logits.shape[0]
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    expd = np.exp(shifted)  # exp(-inf) = 0 at masked entries
    probs = expd / expd.sum(axis=-1, keepdims=True)
    rows = np.arange(B)
    picked = probs[rows, labels]
    if np.any(picked <= 0.0):
        raise ValueError("label has zero probability (masked or invalid)")
    loss = float(-np.log(picked).sum() / B)
    dlogits = probs.copy()
    dlogits[rows, labels] -= 1.0
    dlogits /= B
    if mask is not None:
        dlogits = np.where(mask, dlogits, 0.0)
    return loss, dlogits


# ---------------------------------------------------------------------------
# Adam


class Adam:
    """Bias-corrected Adam over a fixed parameter list.

    The update order is the list order, so two runs over identically
    initialized parameters produce identical trajectories.
    """

    def __init__(
        self,
        params: list[Parameter],
        lr: float = 0.001,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in enumerate(self.params):
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Gradient verification


@dataclass
class GradCheckReport:
    per_param: dict[str, float] = field(default_factory=dict)
    tolerance: float = 0.0

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= self.tolerance


def relative_error(analytic: float, numeric: float, floor: float = 1e-3) -> float:
    """|a - n| scaled by max(|a|, |n|, floor); the floor makes near-zero
    gradients compare absolutely instead of blowing up the ratio."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    loss_fn,
    params: list[Parameter],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    rng: np.random.Generator | None = None,
    max_elements_per_param: int | None = None,
) -> GradCheckReport:
    """Compare params' accumulated gradients against central differences.

    ``loss_fn`` must be a deterministic, side-effect-free function of the
    current parameter values.  The caller runs its analytic backward pass
    first; this only reads ``param.grad``.  Large tensors can be spot-checked
    by sampling ``max_elements_per_param`` coordinates.
    """
    report = GradCheckReport(tolerance=tolerance)
    for p in params:
        flat_val = p.value.reshape(-1)
        flat_grad = p.grad.reshape(-1)
        n = flat_val.size
        if max_elements_per_param is not None and n > max_elements_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(n, size=max_elements_per_param, replace=False)
        else:
            idxs = range(n)
        worst = 0.0
        for j in idxs:
            orig = flat_val[j]
            flat_val[j] = orig + h
            up = loss_fn()
            flat_val[j] = orig - h
            down = loss_fn()
            flat_val[j] = orig
            numeric = (up - down) / (2.0 * h)
            worst = max(worst, relative_error(flat_grad[j], numeric))
        report.per_param[p.name] = worst
    return report


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, params: list[Parameter]) -> None:
    """Versioned binary parameter table; round-trips bit-exactly."""
    path = Path(path)
    with path.open("wb") as f:
        f.write(struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            f.write(struct.pack("<I", p.value.ndim))
            f.write(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
            f.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    data = path.read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = data[off : off + n]
        off += n
        return chunk

    magic, version, count = struct.unpack("<4sII", take(12))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).copy()
        if name in table:
            raise CheckpointError(f"{path}: duplicate parameter {name!r}")
        table[name] = arr
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes")
    return table


def load_into(params: list[Parameter], table: dict[str, np.ndarray]) -> None:
    names = {p.name for p in params}
    if names != set(table):
        missing = names - set(table)
        extra = set(table) - names
        raise CheckpointError(f"parameter table mismatch: missing={missing} extra={extra}")
    for p in params:
        arr = table[p.name]
        if arr.shape != p.value.shape:
            raise CheckpointError(
                f"shape mismatch for {p.name}: {arr.shape} vs {p.value.shape}"
            )
        p.value = arr.astype(np.float64, copy=True)
        p.grad = np.zeros_like(p.value)
