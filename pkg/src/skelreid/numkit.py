"""Minimal numerical kernel: 2-D float64 tensors, a recorded reverse-mode
tape, the activation/softmax primitives the encoder needs, an Adam
optimizer, and finite-difference gradient checking.

Every operation below both computes its value and (unless recording is
disabled via no_grad) attaches a backward closure, so backward() on a
scalar result yields exact gradients for all reachable parameters. The
model is tiny, so everything stays in float64 for easy verification.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor2", "ParamTape", "AdamState", "GradCheckReport",
    "no_grad", "constant", "backward", "adam_step", "grad_check",
    "add", "scale", "mul", "matmul", "transpose", "concat_rows",
    "concat_cols", "slice_rows", "reshape", "add_outer", "leaky_relu",
    "relu", "tanh", "softmax_rows", "mean_stack", "mean_row_blocks",
    "graph_attention_heads", "sum_all", "sqrt", "div_scalar",
    "cross_entropy_row",
]

_RECORDING = True


@contextmanager
def no_grad():
    """Skip tape recording inside the block (forward-only inference)."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


class Tensor2:
    """A rows x cols float64 value, optionally a node of a recorded
    computation. `data` exposes the row-major buffer."""

    __slots__ = ("array", "grad", "_parents", "_backward")

    def __init__(self, array: np.ndarray):
        arr = np.ascontiguousarray(array, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"Tensor2 must be 2-D, got shape {arr.shape}")
        self.array = arr
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None

    @property
    def rows(self) -> int:
        return self.array.shape[0]

    @property
    def cols(self) -> int:
        return self.array.shape[1]

    @property
    def data(self) -> np.ndarray:
        return self.array.reshape(-1)

    def __repr__(self) -> str:
        return f"Tensor2({self.rows}x{self.cols})"


def constant(array) -> Tensor2:
    """Wrap external data as a leaf with no gradient flow."""
    t = Tensor2(np.asarray(array, dtype=np.float64))
    if not np.isfinite(t.array).all():
        raise ValueError("constant contains non-finite entries")
    return t


def _accum(node: Tensor2, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = g.copy()
    else:
        node.grad += g


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def add(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.array.shape != b.array.shape:
        raise ValueError(f"add: shape mismatch {a.array.shape} vs {b.array.shape}")
    out = Tensor2(a.array + b.array)
    if _RECORDING:
        def bw():
            _accum(a, out.grad)
            _accum(b, out.grad)
        out._parents = (a, b)
        out._backward = bw
    return out


def scale(a: Tensor2, c: float) -> Tensor2:
    out = Tensor2(a.array * c)
    if _RECORDING:
        def bw():
            _accum(a, out.grad * c)
        out._parents = (a,)
        out._backward = bw
    return out


def mul(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.array.shape != b.array.shape:
        raise ValueError(f"mul: shape mismatch {a.array.shape} vs {b.array.shape}")
    out = Tensor2(a.array * b.array)
    if _RECORDING:
        def bw():
            _accum(a, out.grad * b.array)
            _accum(b, out.grad * a.array)
        out._parents = (a, b)
        out._backward = bw
    return out


def matmul(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.cols != b.rows:
        raise ValueError(f"matmul: inner dims {a.array.shape} vs {b.array.shape}")
    out = Tensor2(a.array @ b.array)
    if _RECORDING:
        def bw():
            _accum(a, out.grad @ b.array.T)
            _accum(b, a.array.T @ out.grad)
        out._parents = (a, b)
        out._backward = bw
    return out


def transpose(a: Tensor2) -> Tensor2:
    out = Tensor2(a.array.T)
    if _RECORDING:
        def bw():
            _accum(a, out.grad.T)
        out._parents = (a,)
        out._backward = bw
    return out


def concat_rows(parts: list[Tensor2]) -> Tensor2:
    if not parts:
        raise ValueError("concat_rows: empty input")
    cols = parts[0].cols
    for p in parts:
        if p.cols != cols:
            raise ValueError("concat_rows: column mismatch")
    out = Tensor2(np.concatenate([p.array for p in parts], axis=0))
    if _RECORDING:
        offsets = np.cumsum([0] + [p.rows for p in parts])
        def bw():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                _accum(p, out.grad[lo:hi])
        out._parents = tuple(parts)
        out._backward = bw
    return out


def concat_cols(parts: list[Tensor2]) -> Tensor2:
    if not parts:
        raise ValueError("concat_cols: empty input")
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise ValueError("concat_cols: row mismatch")
    out = Tensor2(np.concatenate([p.array for p in parts], axis=1))
    if _RECORDING:
        offsets = np.cumsum([0] + [p.cols for p in parts])
        def bw():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                _accum(p, out.grad[:, lo:hi])
        out._parents = tuple(parts)
        out._backward = bw
    return out


def slice_rows(a: Tensor2, start: int, stop: int) -> Tensor2:
    if not 0 <= start < stop <= a.rows:
        raise ValueError(f"slice_rows: [{start},{stop}) out of range for {a.rows} rows")
    out = Tensor2(a.array[start:stop])
    if _RECORDING:
        def bw():
            g = np.zeros_like(a.array)
            g[start:stop] = out.grad
            _accum(a, g)
        out._parents = (a,)
        out._backward = bw
    return out


def reshape(a: Tensor2, rows: int, cols: int) -> Tensor2:
    if rows * cols != a.rows * a.cols:
        raise ValueError(f"reshape: {a.array.shape} incompatible with ({rows},{cols})")
    out = Tensor2(a.array.reshape(rows, cols))
    if _RECORDING:
        def bw():
            _accum(a, out.grad.reshape(a.array.shape))
        out._parents = (a,)
        out._backward = bw
    return out


def add_outer(col_a: Tensor2, col_b: Tensor2) -> Tensor2:
    """out[i, j] = col_a[i, 0] + col_b[j, 0] for two column vectors."""
    if col_a.cols != 1 or col_b.cols != 1:
        raise ValueError("add_outer expects column vectors")
    out = Tensor2(col_a.array + col_b.array.T)
    if _RECORDING:
        def bw():
            _accum(col_a, out.grad.sum(axis=1, keepdims=True))
            _accum(col_b, out.grad.sum(axis=0)[:, None])
        out._parents = (col_a, col_b)
        out._backward = bw
    return out


def leaky_relu(x: Tensor2, slope: float) -> Tensor2:
    """Elementwise x if x >= 0 else slope * x.

    The gradient at exactly 0 is defined as slope (subgradient choice).
    """
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0,1), got {slope}")
    pos = x.array > 0.0
    out = Tensor2(np.where(pos, x.array, slope * x.array))
    if _RECORDING:
        def bw():
            _accum(x, out.grad * np.where(pos, 1.0, slope))
        out._parents = (x,)
        out._backward = bw
    return out


def relu(x: Tensor2) -> Tensor2:
    pos = x.array > 0.0
    out = Tensor2(np.where(pos, x.array, 0.0))
    if _RECORDING:
        def bw():
            _accum(x, out.grad * pos)
        out._parents = (x,)
        out._backward = bw
    return out


def tanh(x: Tensor2) -> Tensor2:
    out = Tensor2(np.tanh(x.array))
    if _RECORDING:
        y = out.array
        def bw():
            _accum(x, out.grad * (1.0 - y * y))
        out._parents = (x,)
        out._backward = bw
    return out


def softmax_rows(logits: Tensor2, mask=None) -> Tensor2:
    """Row-wise softmax, numerically stable via max subtraction.

    mask (boolean, same shape) restricts each row to its True entries;
    masked entries come out exactly 0. A fully masked row is an error.
    """
    x = logits.array
    if mask is None:
        shifted = x - x.max(axis=1, keepdims=True)
        z = np.exp(shifted)
    else:
        m = mask.array != 0.0 if isinstance(mask, Tensor2) else np.asarray(mask, dtype=bool)
        if m.shape != x.shape:
            raise ValueError(f"softmax_rows: mask shape {m.shape} vs logits {x.shape}")
        counts = m.sum(axis=1)
        if (counts == 0).any():
            row = int(np.argmin(counts))
            raise ValueError(f"softmax_rows: row {row} is fully masked")
        neg = np.where(m, x, -np.inf)
        shifted = np.where(m, neg - neg.max(axis=1, keepdims=True), 0.0)
        z = np.where(m, np.exp(shifted), 0.0)
    s = z.sum(axis=1, keepdims=True)
    out = Tensor2(z / s)
    if _RECORDING:
        a = out.array
        def bw():
            g = out.grad
            dx = a * (g - (g * a).sum(axis=1, keepdims=True))
            _accum(logits, dx)
        out._parents = (logits,)
        out._backward = bw
    return out


def mean_stack(parts: list[Tensor2]) -> Tensor2:
    """Elementwise mean of same-shaped tensors.

    Summation uses math.fsum per element, so the result is exactly
    invariant to the order of the inputs.
    """
    if not parts:
        raise ValueError("mean_stack: empty input")
    shape = parts[0].array.shape
    for p in parts:
        if p.array.shape != shape:
            raise ValueError("mean_stack: shape mismatch")
    k = len(parts)
    if k == 1:
        arr = parts[0].array.copy()
    else:
        stacked = np.stack([p.array for p in parts]).reshape(k, -1)
        arr = np.fromiter(
            (math.fsum(col) for col in stacked.T), dtype=np.float64, count=stacked.shape[1]
        ).reshape(shape) / k
    out = Tensor2(arr)
    if _RECORDING:
        def bw():
            g = out.grad / k
            for p in parts:
                _accum(p, g)
        out._parents = tuple(parts)
        out._backward = bw
    return out


def sum_all(a: Tensor2) -> Tensor2:
    out = Tensor2(np.array([[a.array.sum()]]))
    if _RECORDING:
        def bw():
            _accum(a, np.full_like(a.array, out.grad[0, 0]))
        out._parents = (a,)
        out._backward = bw
    return out


def sqrt(a: Tensor2) -> Tensor2:
    if (a.array < 0).any():
        raise ValueError("sqrt of a negative entry")
    out = Tensor2(np.sqrt(a.array))
    if _RECORDING:
        y = out.array
        def bw():
            _accum(a, out.grad * 0.5 / y)
        out._parents = (a,)
        out._backward = bw
    return out


def div_scalar(a: Tensor2, s: Tensor2) -> Tensor2:
    """Divide every entry of a by the 1x1 tensor s."""
    if s.array.shape != (1, 1):
        raise ValueError("div_scalar expects a 1x1 divisor")
    v = s.array[0, 0]
    if v == 0.0:
        raise ValueError("div_scalar: zero divisor")
    out = Tensor2(a.array / v)
    if _RECORDING:
        def bw():
            _accum(a, out.grad / v)
            _accum(s, np.array([[-(out.grad * a.array).sum() / (v * v)]]))
        out._parents = (a, s)
        out._backward = bw
    return out


def mean_row_blocks(a: Tensor2, blocks: int) -> Tensor2:
    """Mean over `blocks` equal stacked row blocks: (blocks*n, d) -> (n, d)."""
    if a.rows % blocks != 0:
        raise ValueError(f"mean_row_blocks: {a.rows} rows not divisible by {blocks}")
    n = a.rows // blocks
    out = Tensor2(a.array.reshape(blocks, n, a.cols).mean(axis=0))
    if _RECORDING:
        def bw():
            _accum(a, np.tile(out.grad / blocks, (blocks, 1)))
        out._parents = (a,)
        out._backward = bw
    return out


_HEAD_ACTIVATIONS = ("tanh", "relu", "identity")


def graph_attention_heads(
    h_all: Tensor2,
    a_flat: Tensor2,
    b_flat: Tensor2,
    mask: np.ndarray,
    heads: int,
    slope: float,
    activation: str = "tanh",
) -> tuple[Tensor2, np.ndarray]:
    """All attention heads of one graph level in a single batched kernel.

    h_all holds the per-head projected node features side by side
    (n x heads*d, head s in columns [s*d, (s+1)*d)); a_flat / b_flat stack
    the per-head relation half-vectors ((heads*d) x 1). For each head:
    logits[i, j] = LeakyReLU(a_s . h_i + b_s . h_j), softmax-normalized
    over the mask support (row-wise), then used to aggregate the head's
    features through the activation.

    Returns the stacked head outputs ((heads*n) x d, head-major) and the
    attention tensors as a plain (heads, n, n) array.
    """
    if activation not in _HEAD_ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must be in (0,1), got {slope}")
    n = h_all.rows
    if h_all.cols % heads != 0:
        raise ValueError(f"{h_all.cols} feature columns not divisible by {heads} heads")
    d = h_all.cols // heads
    if a_flat.array.shape != (heads * d, 1) or b_flat.array.shape != (heads * d, 1):
        raise ValueError("relation vectors must be (heads*d) x 1")
    m = np.asarray(mask, dtype=bool)
    if m.shape != (n, n):
        raise ValueError(f"mask shape {m.shape}, expected ({n}, {n})")
    counts = m.sum(axis=1)
    if (counts == 0).any():
        raise ValueError(f"node {int(np.argmin(counts))} has an empty neighbor set")

    h3 = h_all.array.reshape(n, heads, d)
    a3 = a_flat.array.reshape(heads, d)
    b3 = b_flat.array.reshape(heads, d)
    ha = np.einsum("nsd,sd->sn", h3, a3)
    hb = np.einsum("nsd,sd->sn", h3, b3)
    raw = ha[:, :, None] + hb[:, None, :]
    pos = raw > 0.0
    lact = np.where(pos, raw, slope * raw)
    masked = np.where(m[None], lact, -np.inf)
    shifted = np.where(m[None], masked - masked.max(axis=2, keepdims=True), 0.0)
    z = np.where(m[None], np.exp(shifted), 0.0)
    attn = z / z.sum(axis=2, keepdims=True)
    u = np.einsum("sij,jsd->sid", attn, h3)
    if activation == "tanh":
        y = np.tanh(u)
    elif activation == "relu":
        y = np.where(u > 0.0, u, 0.0)
    else:
        y = u
    out = Tensor2(y.reshape(heads * n, d))

    if _RECORDING:
        def bw():
            gy = out.grad.reshape(heads, n, d)
            if activation == "tanh":
                gu = gy * (1.0 - y * y)
            elif activation == "relu":
                gu = gy * (u > 0.0)
            else:
                gu = gy
            ga = np.einsum("sid,jsd->sij", gu, h3)
            gh3 = np.einsum("sij,sid->jsd", attn, gu)
            glact = attn * (ga - (ga * attn).sum(axis=2, keepdims=True))
            graw = glact * np.where(pos, 1.0, slope)
            gha = graw.sum(axis=2)
            ghb = graw.sum(axis=1)
            gh3 += np.einsum("sn,sd->nsd", gha, a3)
            gh3 += np.einsum("sn,sd->nsd", ghb, b3)
            _accum(h_all, gh3.reshape(n, heads * d))
            _accum(a_flat, np.einsum("sn,nsd->sd", gha, h3).reshape(heads * d, 1))
            _accum(b_flat, np.einsum("sn,nsd->sd", ghb, h3).reshape(heads * d, 1))
        out._parents = (h_all, a_flat, b_flat)
        out._backward = bw
    return out, attn


def cross_entropy_row(logits: Tensor2, target: int) -> Tensor2:
    """-log softmax(logits)[target] for a 1 x z logit row, fused for
    numerical stability."""
    if logits.rows != 1:
        raise ValueError("cross_entropy_row expects a 1 x z row")
    if not 0 <= target < logits.cols:
        raise ValueError(f"cross_entropy_row: target {target} out of range")
    x = logits.array[0]
    mx = x.max()
    z = np.exp(x - mx)
    denom = z.sum()
    loss = math.log(denom) + mx - x[target]
    out = Tensor2(np.array([[loss]]))
    if _RECORDING:
        p = z / denom
        def bw():
            g = out.grad[0, 0]
            dx = p.copy()
            dx[target] -= 1.0
            _accum(logits, g * dx[None, :])
        out._parents = (logits,)
        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# parameters, backward pass, optimizer
# ---------------------------------------------------------------------------


class ParamTape:
    """Named parameter tensors with persistent gradient accumulators."""

    def __init__(self):
        self._params: dict[str, Tensor2] = {}

    def parameter(self, name: str, array: np.ndarray) -> Tensor2:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        node = Tensor2(np.array(array, dtype=np.float64))
        if not np.isfinite(node.array).all():
            raise ValueError(f"parameter {name!r} contains non-finite entries")
        node.grad = np.zeros_like(node.array)
        self._params[name] = node
        return node

    def __getitem__(self, name: str) -> Tensor2:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for node in self._params.values():
            node.grad[...] = 0.0

    def gradients(self) -> dict[str, np.ndarray]:
        return {name: node.grad for name, node in self._params.items()}

    def size(self) -> int:
        return sum(node.array.size for node in self._params.values())


def backward(loss: Tensor2) -> None:
    """Accumulate d loss / d node into .grad over the recorded graph.

    loss must be a 1x1 node of a recorded forward pass; parameters keep
    their accumulated gradients until explicitly zeroed.
    """
    if not isinstance(loss, Tensor2):
        raise ValueError("backward expects a Tensor2 scalar node")
    if loss.array.shape != (1, 1):
        raise ValueError(f"backward expects a 1x1 scalar, got {loss.array.shape}")

    topo: list[Tensor2] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor2, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    if loss.grad is None:
        loss.grad = np.ones((1, 1))
    else:
        loss.grad += 1.0
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward()


@dataclass
class AdamState:
    """Standard first/second-moment state for the Adam recurrence."""

    lr: float = 0.00035
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamTape, state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place, then zero gradients."""
    for name, node in params.items():
        if not np.isfinite(node.grad).all():
            raise ValueError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, node in params.items():
        g = node.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(node.array)
            state.v[name] = np.zeros_like(node.array)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        node.array -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    params.zero_grads()


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    checked: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float
    step: float

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def failures(self) -> list[str]:
        return [e.name for e in self.entries if e.max_rel_error > self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(
    forward,
    params: ParamTape,
    tolerance: float,
    *,
    step: float = 1e-5,
    samples_per_param: int = 32,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare backward() gradients against central finite differences.

    forward is a zero-argument closure returning the scalar loss node; it is
    re-invoked with perturbed parameters, so it must read parameter values
    from the tape. Per parameter, up to samples_per_param coordinates are
    sampled and the relative error is the max absolute deviation divided by
    the larger of the two gradient infinity norms (floored at 1e-10).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    params.zero_grads()
    loss = forward()
    backward(loss)
    analytic = {name: node.grad.copy() for name, node in params.items()}
    params.zero_grads()

    entries = []
    for name, node in params.items():
        flat = node.array.reshape(-1)
        n = flat.size
        if n <= samples_per_param:
            idxs = np.arange(n)
        else:
            idxs = np.sort(rng.choice(n, size=samples_per_param, replace=False))
        numeric = np.empty(len(idxs))
        for pos, i in enumerate(idxs):
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                lp = forward().array[0, 0]
            flat[i] = orig - step
            with no_grad():
                lm = forward().array[0, 0]
            flat[i] = orig
            numeric[pos] = (lp - lm) / (2.0 * step)
        ana = analytic[name].reshape(-1)[idxs]
        denom = max(np.abs(ana).max(), np.abs(numeric).max(), 1e-10)
        rel = float(np.abs(ana - numeric).max() / denom)
        entries.append(GradCheckEntry(name=name, max_rel_error=rel, checked=len(idxs)))
    return GradCheckReport(entries=entries, tolerance=tolerance, step=step)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "skelreid-checkpoint/1"


def checkpoint_payload(params: ParamTape, metadata: dict) -> dict:
    """Self-describing JSON payload: format tag, metadata, and every
    parameter as shape plus row-major data."""
    return {
        "format": CHECKPOINT_FORMAT,
        "metadata": metadata,
        "params": {
            name: {
                "shape": [node.rows, node.cols],
                "data": [float(x) for x in node.data],
            }
            for name, node in params.items()
        },
    }


def load_checkpoint_payload(doc: dict) -> tuple[dict, dict]:
    """Return (metadata, {name: array}) from a checkpoint payload."""
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(
            f"unsupported checkpoint format tag {doc.get('format')!r}, "
            f"expected {CHECKPOINT_FORMAT!r}"
        )
    arrays = {}
    for name, entry in doc["params"].items():
        rows, cols = (int(x) for x in entry["shape"])
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(rows, cols)
        arrays[name] = arr
    return doc.get("metadata", {}), arrays
