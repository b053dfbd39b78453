"""Dense tensors, numeric kernels, and a reverse-mode autodiff tape.

Every kernel comes in a tape-aware flavour: pass a ``Tape`` and the op records
a backward rule, pass ``tape=None`` for a plain forward evaluation.  Default
scalar precision is float32; gradient checking runs the same graph in float64
(pass float64 arrays into ``Tensor``).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

GELU_C0 = 0.7978845608  # sqrt(2/pi), pinned for cross-implementation agreement
GELU_C1 = 0.044715
LAYERNORM_EPS = 1e-5


class TensorError(Exception):
    """Base class for kernel errors."""


class ShapeError(TensorError):
    """Operands have incompatible shapes."""


class NonFiniteError(TensorError):
    """A forward op produced or consumed NaN/Inf while validation is on."""


_validate_finite = True


def set_validation(on: bool) -> bool:
    """Toggle the NaN/Inf check run on every op output. Returns previous value."""
    global _validate_finite
    prev = _validate_finite
    _validate_finite = bool(on)
    return prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _validate_finite and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite values in result")


_ids = itertools.count(1)


class Tensor:
    """N-dimensional float array with a unique id for tape lookup."""

    __slots__ = ("data", "id", "is_param", "name")

    def __init__(self, data, dtype=None, is_param: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.id = next(_ids)
        self.is_param = is_param
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), is_param=self.is_param, name=self.name)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), is_param=self.is_param, name=self.name)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


@dataclass
class _Node:
    output_id: int
    parent_ids: tuple
    # maps the output gradient to one gradient array (or None) per parent
    backward: Callable[[np.ndarray], Sequence]
    tag: str = ""


class Tape:
    """Ordered record of op applications; replayed in reverse by backward()."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: dict[int, np.ndarray] = {}
        self._known: set[int] = set()

    def record(self, out: Tensor, parents: Sequence[Tensor], backward, tag: str = "") -> None:
        self.nodes.append(_Node(out.id, tuple(p.id for p in parents), backward, tag))
        self._known.add(out.id)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar loss; returns tensor-id -> gradient array."""
        if loss.data.shape not in ((), (1,)):
            raise ShapeError(f"backward: loss must be scalar-shaped, got {loss.data.shape}")
        if loss.id not in self._known:
            raise TensorError("backward: loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.data.shape, dtype=loss.data.dtype)}
        for node in reversed(self.nodes):
            g = grads.get(node.output_id)
            if g is None:
                continue
            for pid, pg in zip(node.parent_ids, node.backward(g)):
                if pg is None:
                    continue
                acc = grads.get(pid)
                grads[pid] = pg if acc is None else acc + pg
        self.grads = grads
        return grads

    def grad(self, t: Tensor) -> np.ndarray | None:
        return self.grads.get(t.id)


# ---------------------------------------------------------------------------
# kernels


def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    _check_finite(out.data, "matmul")
    if tape is not None:
        ad, bd = a.data, b.data
        tape.record(out, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")
    return out


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    _check_finite(out.data, "add")
    if tape is not None:
        tape.record(out, (a, b), lambda g: (g, g), "add")
    return out


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    _check_finite(out.data, "mul")
    if tape is not None:
        ad, bd = a.data, b.data
        tape.record(out, (a, b), lambda g: (g * bd, g * ad), "mul")
    return out


def gelu(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Tanh-approximation GELU: 0.5x(1 + tanh(c0 (x + c1 x^3)))."""
    xd = x.data
    t = xd * xd
    t *= xd
    t *= GELU_C1
    t += xd
    t *= GELU_C0
    np.tanh(t, out=t)
    y = t + 1.0
    y *= xd
    y *= 0.5
    out = Tensor(y)
    _check_finite(out.data, "gelu")
    if tape is not None:

        def backward(g):
            dinner = GELU_C0 * (1.0 + 3.0 * GELU_C1 * xd**2)
            dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * dinner
            return (g * dx,)

        tape.record(out, (x,), backward, "gelu")
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS,
               tape: Tape | None = None) -> Tensor:
    d = x.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm: empty last axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must be ({d},), got {gamma.shape}/{beta.shape}")
    xd = x.data
    mean = xd.mean(axis=-1, keepdims=True)
    xm = xd - mean
    var = np.mean(xm * xm, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xm * inv
    out = Tensor(xhat * gamma.data + beta.data)
    _check_finite(out.data, "layer_norm")
    if tape is not None:
        gd = gamma.data

        def backward(g):
            # standard layernorm backward over the last axis
            gxhat = g * gd
            dx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
            axes = tuple(range(xd.ndim - 1))
            return (dx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

        tape.record(out, (x, gamma, beta), backward, "layer_norm")
    return out


def split_axis(x: Tensor, axis: int, tape: Tape | None = None) -> tuple[Tensor, Tensor]:
    n = x.shape[axis]
    if n % 2 != 0:
        raise ShapeError(f"split_axis: extent {n} along axis {axis} is odd")
    h = n // 2
    lo = [slice(None)] * x.data.ndim
    hi = [slice(None)] * x.data.ndim
    lo[axis] = slice(0, h)
    hi[axis] = slice(h, n)
    a = Tensor(x.data[tuple(lo)].copy())
    b = Tensor(x.data[tuple(hi)].copy())
    if tape is not None:
        shape = x.shape

        def bwd_half(sl):
            def backward(g):
                full = np.zeros(shape, dtype=g.dtype)
                full[sl] = g
                return (full,)
            return backward

        tape.record(a, (x,), bwd_half(tuple(lo)), "split_lo")
        tape.record(b, (x,), bwd_half(tuple(hi)), "split_hi")
    return a, b


def concat(a: Tensor, b: Tensor, axis: int, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.concatenate([a.data, b.data], axis=axis))
    if tape is not None:
        na = a.shape[axis]

        def backward(g):
            ga, gb = np.split(g, [na], axis=axis)
            return (ga, gb)

        tape.record(out, (a, b), backward, "concat")
    return out


def _pad_amount(h: int, k: int, stride: int, padding: str) -> int:
    if padding == "valid":
        return 0
    if padding == "same":
        # output extent ceil(h/stride); symmetric padding assumed (odd kernels)
        out = -(-h // stride)
        total = max((out - 1) * stride + k - h, 0)
        if total % 2 != 0:
            raise ShapeError(f"conv2d: same-padding needs symmetric pad (kernel {k}, extent {h})")
        return total // 2
    raise ValueError(f"conv2d: unknown padding {padding!r}")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, ph: int, pw: int):
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    Ho = (H + 2 * ph - kh) // stride + 1
    Wo = (W + 2 * pw - kw) // stride + 1
    s = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(B, C, Ho, Wo, kh, kw),
        strides=(s[0], s[1], s[2] * stride, s[3] * stride, s[2], s[3]),
        writeable=False,
    )
    # [B*Ho*Wo, C*kh*kw]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    return np.ascontiguousarray(cols), Ho, Wo


def _col2im(cols: np.ndarray, xshape, kh: int, kw: int, stride: int, ph: int, pw: int):
    B, C, H, W = xshape
    Ho = (H + 2 * ph - kh) // stride + 1
    Wo = (W + 2 * pw - kw) // stride + 1
    xp = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=cols.dtype)
    cols6 = cols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + Ho * stride:stride, j:j + Wo * stride:stride] += cols6[:, :, :, :, i, j]
    if ph or pw:
        return xp[:, :, ph:ph + H, pw:pw + W]
    return xp


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
           padding: str = "same", tape: Tape | None = None) -> Tensor:
    """Cross-correlation (no kernel flip) with per-output-channel bias."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input/kernel, got {x.shape}/{kernel.shape}")
    B, C, H, W = x.shape
    Co, Ci, kh, kw = kernel.shape
    if Ci != C:
        raise ShapeError(f"conv2d: input channels {C} != kernel channels {Ci}")
    if bias.shape != (Co,):
        raise ShapeError(f"conv2d: bias must be ({Co},), got {bias.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d: non-positive stride {stride}")
    ph = _pad_amount(H, kh, stride, padding)
    pw = _pad_amount(W, kw, stride, padding)
    if kh > H + 2 * ph or kw > W + 2 * pw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input "
                         f"{H + 2 * ph}x{W + 2 * pw}")
    cols, Ho, Wo = _im2col(x.data, kh, kw, stride, ph, pw)
    kmat = kernel.data.reshape(Co, Ci * kh * kw)
    y = cols @ kmat.T + bias.data
    out = Tensor(y.reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2))
    _check_finite(out.data, "conv2d")
    if tape is not None:
        xshape = x.shape

        def backward(g):
            gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Co)
            dk = (gmat.T @ cols).reshape(Co, Ci, kh, kw)
            db = gmat.sum(axis=0)
            dcols = gmat @ kmat
            dx = _col2im(dcols, xshape, kh, kw, stride, ph, pw)
            return (dx, dk, db)

        tape.record(out, (x, kernel, bias), backward, "conv2d")
    return out


def maxpool2d(x: Tensor, tape: Tape | None = None) -> Tensor:
    """2x2 max pooling, stride 2; ties route gradient to the first element."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: need 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2d: spatial extents must be even, got {H}x{W}")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(B, C, H // 2, W // 2, 4)
    idx = flat.argmax(axis=-1)  # argmax takes the first maximum on ties
    out = Tensor(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0])
    if tape is not None:

        def backward(g):
            gw = np.zeros_like(flat)
            np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
            dx = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            return (dx.reshape(B, C, H, W),)

        tape.record(out, (x,), backward, "maxpool2d")
    return out


def affine_last(x: Tensor, w: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """x[..., k] @ w[k, m] + b[m]: projection over the last (feature) axis."""
    k, m = w.shape
    if x.shape[-1] != k:
        raise ShapeError(f"affine_last: input last axis {x.shape[-1]} != weight rows {k}")
    if b.shape != (m,):
        raise ShapeError(f"affine_last: bias must be ({m},), got {b.shape}")
    out = Tensor(x.data @ w.data + b.data)
    _check_finite(out.data, "affine_last")
    if tape is not None:
        xd, wd = x.data, w.data

        def backward(g):
            x2 = xd.reshape(-1, k)
            g2 = g.reshape(-1, m)
            return (g @ wd.T, x2.T @ g2, g2.sum(axis=0))

        tape.record(out, (x, w, b), backward, "affine_last")
    return out


def token_affine(x: Tensor, w: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """out[s, i, d] = sum_j w[i, j] x[s, j, d] + b[i]: projection over the token axis."""
    if x.data.ndim != 3:
        raise ShapeError(f"token_affine: need [batch, tokens, features], got {x.shape}")
    m, n = w.shape
    if x.shape[1] != n:
        raise ShapeError(f"token_affine: token count {x.shape[1]} != weight columns {n}")
    if b.shape != (m,):
        raise ShapeError(f"token_affine: bias must be ({m},), got {b.shape}")
    y = np.matmul(w.data, x.data)  # (m,n) @ (s,n,d) broadcasts over s
    y += b.data[None, :, None]
    out = Tensor(y)
    _check_finite(out.data, "token_affine")
    if tape is not None:
        xd, wd = x.data, w.data

        def backward(g):
            dx = np.matmul(wd.T, g)
            dw = np.matmul(g, xd.transpose(0, 2, 1)).sum(axis=0)
            return (dx, dw, g.sum(axis=(0, 2)))

        tape.record(out, (x, w, b), backward, "token_affine")
    return out


def mean_tokens(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Global mean pool over axis 1 of a [batch, tokens, features] tensor."""
    if x.data.ndim != 3:
        raise ShapeError(f"mean_tokens: need 3-D input, got {x.shape}")
    n = x.shape[1]
    out = Tensor(x.data.mean(axis=1))
    if tape is not None:
        tape.record(out, (x,), lambda g: (np.repeat(g[:, None, :], n, axis=1) / n,), "mean_tokens")
    return out


def extract_patches(x: Tensor, p: int, tape: Tape | None = None) -> Tensor:
    """[B,C,H,W] -> [B, (H/p)(W/p), C*p*p]; channel-major, row-major within a patch."""
    B, C, H, W = x.shape
    if H % p or W % p:
        raise ShapeError(f"extract_patches: {H}x{W} not divisible by patch size {p}")
    hp, wp = H // p, W // p
    t = x.data.reshape(B, C, hp, p, wp, p).transpose(0, 2, 4, 1, 3, 5)
    out = Tensor(t.reshape(B, hp * wp, C * p * p))
    if tape is not None:

        def backward(g):
            g6 = g.reshape(B, hp, wp, C, p, p).transpose(0, 3, 1, 4, 2, 5)
            return (g6.reshape(B, C, H, W),)

        tape.record(out, (x,), backward, "extract_patches")
    return out


def flatten_spatial(x: Tensor, tape: Tape | None = None) -> Tensor:
    """[B,C,h,w] -> [B, h*w, C]: each spatial location becomes one token."""
    B, C, h, w = x.shape
    out = Tensor(x.data.reshape(B, C, h * w).transpose(0, 2, 1).copy())
    if tape is not None:
        tape.record(out, (x,),
                    lambda g: (g.transpose(0, 2, 1).reshape(B, C, h, w),), "flatten_spatial")
    return out


def sum_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))
    if tape is not None:
        xshape, dt = x.shape, x.data.dtype
        tape.record(out, (x,), lambda g: (np.full(xshape, g, dtype=dt),), "sum_all")
    return out


def softmax_cross_entropy(logits: Tensor, labels, tape: Tape | None = None) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    ld = logits.data
    if ld.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: need [batch, classes], got {logits.shape}")
    B, K = ld.shape
    labels = np.asarray(labels)
    if labels.shape != (B,):
        raise ShapeError(f"softmax_cross_entropy: need {B} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"softmax_cross_entropy: label out of range [0,{K})")
    z = ld - ld.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = Tensor(np.asarray(-logp[np.arange(B), labels].mean(), dtype=ld.dtype))
    _check_finite(loss.data, "softmax_cross_entropy")
    if tape is not None:
        p = np.exp(logp)

        def backward(g):
            d = p.copy()
            d[np.arange(B), labels] -= 1.0
            return (g * d / B,)

        tape.record(loss, (logits,), backward, "softmax_cross_entropy")
    return loss


# ---------------------------------------------------------------------------
# deterministic RNG (splitmix64)


class Rng:
    """splitmix64 generator: identical seed gives an identical sample sequence
    on every platform.  Bulk draws reproduce the scalar sequence exactly."""

    GOLDEN = 0x9E3779B97F4A7C15
    MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self.state = seed & self.MASK

    @staticmethod
    def _mix(z: int) -> int:
        M = Rng.MASK
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M
        return z ^ (z >> 31)

    def next_u64(self) -> int:
        self.state = (self.state + self.GOLDEN) & self.MASK
        return self._mix(self.state)

    def _bulk_u64(self, n: int) -> np.ndarray:
        base = np.uint64(self.state)
        with np.errstate(over="ignore"):
            z = base + (np.arange(1, n + 1, dtype=np.uint64) * np.uint64(self.GOLDEN))
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * self.GOLDEN) & self.MASK
        return z

    def uniform(self, n: int = 1) -> np.ndarray:
        """n doubles in [0, 1)."""
        return (self._bulk_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        """Standard Box-Muller normals scaled by std."""
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u1 = self.uniform(pairs)
        u2 = self.uniform(pairs)
        u1 = np.maximum(u1, 2.0**-53)  # avoid log(0)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        return (z * std).reshape(shape).astype(dtype)

    def shuffle(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.next_u64() % (i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    passed: bool
    flagged: list = field(default_factory=list)  # (param, index) kink coordinates
    per_param: dict = field(default_factory=dict)


def grad_check(f, params: Sequence[Tensor], h: float = 1e-4, tol: float = 1e-3) -> GradCheckReport:
    """Compare tape gradients of scalar f(tape) against central finite differences.

    Run with float64 parameter data; float32 central differences at h=1e-4 are
    too noisy to be meaningful.  Coordinates that the probe cannot judge are
    flagged and excluded from the pass/fail verdict instead of failing
    silently: subgradient kinks (the two one-sided differences disagree,
    e.g. a maxpool tie) and mismatches below the difference quotient's own
    roundoff resolution of |f|*eps/h.
    """
    base1 = float(f(None).data)
    base2 = float(f(None).data)
    if base1 != base2:
        raise TensorError("grad_check: f is non-deterministic "
                          f"({base1!r} != {base2!r} on repeat evaluation)")
    tape = Tape()
    loss = f(tape)
    grads = tape.backward(loss)
    prev_validation = set_validation(False)  # probe loop is hot; inputs are controlled

    max_rel = 0.0
    worst = ""
    flagged = []
    per_param = {}
    try:
        for pi, p in enumerate(params):
            name = p.name or f"param{pi}"
            an = grads.get(p.id)
            if an is None:
                an = np.zeros_like(p.data)
            an = an.reshape(-1)
            flat = p.data.reshape(-1)
            if flat.base is None and p.data.ndim > 1:
                raise TensorError(f"grad_check: parameter {name} is not contiguous")
            p_max = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(None).data)
                flat[i] = orig - h
                fm = float(f(None).data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                rel = abs(an[i] - num) / max(abs(an[i]), abs(num), 1e-8)
                if rel > tol:
                    # (fp - fm) carries roundoff of order |f|*eps, so the
                    # quotient cannot resolve differences below |f|*eps/h;
                    # a mismatch under that floor says nothing about the
                    # gradient and is flagged, not failed
                    noise = 2.0 * abs(base1) * np.finfo(np.float64).eps / h
                    if abs(an[i] - num) <= noise:
                        flagged.append((name, i))
                        continue
                    # one-sided probes: a genuine kink gives very different slopes
                    fwd = (fp - base1) / h
                    bwd = (base1 - fm) / h
                    if abs(fwd - bwd) / max(abs(fwd), abs(bwd), 1e-8) > 10.0 * tol:
                        flagged.append((name, i))
                        continue
                if rel > p_max:
                    p_max = rel
                if rel > max_rel:
                    max_rel = rel
                    worst = name
            per_param[name] = p_max
    finally:
        set_validation(prev_validation)
    return GradCheckReport(max_rel_err=max_rel, worst_param=worst,
                           passed=max_rel <= tol, flagged=flagged, per_param=per_param)
