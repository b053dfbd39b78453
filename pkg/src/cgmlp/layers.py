"""Building blocks: patch embedding, spatial/channel gating units, gMLP block,
conv stem block, and the pooled classifier head.

Every layer owns its parameters as named Tensors and exposes
``params() -> [(name, Tensor)]`` plus ``forward(x, tape)``.  Initialization is
pinned: affine/conv weights ~ Normal(0, sqrt(2/fan_in)) with zero bias; gate
projections ~ Normal(0, 1e-3) with bias 1 so freshly built gates pass X1
through nearly unchanged (deep stacks stay trainable from step one).
"""

from __future__ import annotations

import numpy as np

from .tensor import (Rng, Tape, Tensor, ShapeError, affine_last, conv2d, flatten_spatial,
                     extract_patches, gelu, layer_norm, maxpool2d, mean_tokens, mul,
                     split_axis, token_affine, add)

GATE_INIT_STD = 1e-3


def _he(rng: Rng, shape, fan_in: int, dtype) -> np.ndarray:
    return rng.normal(shape, std=float(np.sqrt(2.0 / fan_in)), dtype=dtype)


class Layer:
    def params(self):
        return [(n, t) for n, t in self.__dict__.items() if isinstance(t, Tensor)]


class PatchEmbed(Layer):
    """Non-overlapping p x p patches, flattened and projected to d features."""

    def __init__(self, rng: Rng, in_channels: int, patch: int, d: int, dtype=np.float32):
        self.patch = patch
        k = in_channels * patch * patch
        self.w = Tensor(_he(rng, (k, d), k, dtype), is_param=True)
        self.b = Tensor(np.zeros(d, dtype=dtype), is_param=True)

    def forward(self, img: Tensor, tape: Tape | None = None) -> Tensor:
        tokens = extract_patches(img, self.patch, tape)
        return affine_last(tokens, self.w, self.b, tape)


class FeatureMapTokenizer(Layer):
    """Each spatial location of a [B,C,h,w] feature map becomes one token,
    channels projected to d."""

    def __init__(self, rng: Rng, in_channels: int, d: int, dtype=np.float32):
        self.w = Tensor(_he(rng, (in_channels, d), in_channels, dtype), is_param=True)
        self.b = Tensor(np.zeros(d, dtype=dtype), is_param=True)

    def forward(self, fm: Tensor, tape: Tape | None = None) -> Tensor:
        return affine_last(flatten_spatial(fm, tape), self.w, self.b, tape)


class SpatialGatingUnit(Layer):
    """Split [B,n,d] on the feature axis, gate X1 by a token-mixing affine of
    the normalized X2: out = X1 * (W X2 + b), out shape [B,n,d/2]."""

    def __init__(self, rng: Rng, tokens: int, d: int, dtype=np.float32):
        if d % 2:
            raise ShapeError(f"SpatialGatingUnit: feature dim {d} must be even")
        self.tokens = tokens
        # std shrinks with fan-in so the summed gate deviation stays ~1e-3
        # regardless of token count (near-identity init contract)
        self.w = Tensor(rng.normal((tokens, tokens), std=GATE_INIT_STD / np.sqrt(tokens),
                                   dtype=dtype), is_param=True)
        self.b = Tensor(np.ones(tokens, dtype=dtype), is_param=True)
        self.gamma = Tensor(np.ones(d // 2, dtype=dtype), is_param=True)
        self.beta = Tensor(np.zeros(d // 2, dtype=dtype), is_param=True)

    def forward(self, x: Tensor, tape: Tape | None = None) -> Tensor:
        if x.shape[1] != self.tokens:
            raise ShapeError(f"SpatialGatingUnit: got {x.shape[1]} tokens, "
                             f"weight is for {self.tokens}")
        x1, x2 = split_axis(x, axis=2, tape=tape)
        x2 = layer_norm(x2, self.gamma, self.beta, tape=tape)
        gate = token_affine(x2, self.w, self.b, tape)
        return mul(x1, gate, tape)


class ChannelGatingUnit(Layer):
    """The axis-flipped dual: split [B,n,d] on the token axis, gate X1 by a
    per-token channel projection of the normalized X2, out shape [B,n/2,d]."""

    def __init__(self, rng: Rng, d: int, dtype=np.float32):
        self.w = Tensor(rng.normal((d, d), std=GATE_INIT_STD / np.sqrt(d), dtype=dtype),
                        is_param=True)
        self.b = Tensor(np.ones(d, dtype=dtype), is_param=True)
        self.gamma = Tensor(np.ones(d, dtype=dtype), is_param=True)
        self.beta = Tensor(np.zeros(d, dtype=dtype), is_param=True)

    def forward(self, x: Tensor, tape: Tape | None = None) -> Tensor:
        if x.shape[1] % 2:
            raise ShapeError(f"ChannelGatingUnit: token count {x.shape[1]} must be even")
        x1, x2 = split_axis(x, axis=1, tape=tape)
        x2 = layer_norm(x2, self.gamma, self.beta, tape=tape)
        gate = affine_last(x2, self.w, self.b, tape)
        return mul(x1, gate, tape)


class GmlpBlock(Layer):
    """Pre-norm, expand to d_ffn, GELU, gating unit, project back to d,
    residual.  Channel-gated blocks halve the token count inside the gate and
    restore it with a learned token-axis affine so the residual stays typed."""

    def __init__(self, rng: Rng, tokens: int, d: int, d_ffn: int, gating: str,
                 dtype=np.float32):
        if gating not in ("spatial", "channel"):
            raise ValueError(f"GmlpBlock: unknown gating {gating!r}")
        self.gating = gating
        self.gamma = Tensor(np.ones(d, dtype=dtype), is_param=True)
        self.beta = Tensor(np.zeros(d, dtype=dtype), is_param=True)
        self.u_w = Tensor(_he(rng, (d, d_ffn), d, dtype), is_param=True)
        self.u_b = Tensor(np.zeros(d_ffn, dtype=dtype), is_param=True)
        if gating == "spatial":
            self.gate = SpatialGatingUnit(rng, tokens, d_ffn, dtype)
            v_in = d_ffn // 2
        else:
            self.gate = ChannelGatingUnit(rng, d_ffn, dtype)
            v_in = d_ffn
            self.r_w = Tensor(_he(rng, (tokens, tokens // 2), tokens // 2, dtype),
                              is_param=True)
            self.r_b = Tensor(np.zeros(tokens, dtype=dtype), is_param=True)
        self.v_w = Tensor(_he(rng, (v_in, d), v_in, dtype), is_param=True)
        self.v_b = Tensor(np.zeros(d, dtype=dtype), is_param=True)

    def params(self):
        own = [(n, t) for n, t in self.__dict__.items() if isinstance(t, Tensor)]
        return own + [(f"gate.{n}", t) for n, t in self.gate.params()]

    def forward(self, x: Tensor, tape: Tape | None = None) -> Tensor:
        h = layer_norm(x, self.gamma, self.beta, tape=tape)
        h = gelu(affine_last(h, self.u_w, self.u_b, tape), tape)
        h = self.gate.forward(h, tape)
        h = affine_last(h, self.v_w, self.v_b, tape)
        if self.gating == "channel":
            h = token_affine(h, self.r_w, self.r_b, tape)
        return add(x, h, tape)


class ConvStemBlock(Layer):
    """3x3 same-padding conv, GELU, 2x2 maxpool: halves the spatial extent."""

    def __init__(self, rng: Rng, in_channels: int, out_channels: int, dtype=np.float32):
        fan_in = in_channels * 9
        self.kernel = Tensor(_he(rng, (out_channels, in_channels, 3, 3), fan_in, dtype),
                             is_param=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), is_param=True)

    def forward(self, x: Tensor, tape: Tape | None = None, capture: dict | None = None,
                tag: str = "") -> Tensor:
        h = gelu(conv2d(x, self.kernel, self.bias, stride=1, padding="same", tape=tape), tape)
        if capture is not None and f"{tag}.act" in capture:
            capture[f"{tag}.act"] = h.data.copy()
        h = maxpool2d(h, tape)
        if capture is not None and f"{tag}.pool" in capture:
            capture[f"{tag}.pool"] = h.data.copy()
        return h


class ClassifierHead(Layer):
    """Mean pool over tokens, then an affine map to class logits."""

    def __init__(self, rng: Rng, d: int, classes: int, dtype=np.float32):
        self.w = Tensor(_he(rng, (d, classes), d, dtype), is_param=True)
        self.b = Tensor(np.zeros(classes, dtype=dtype), is_param=True)

    def forward(self, x: Tensor, tape: Tape | None = None) -> Tensor:
        return affine_last(mean_tokens(x, tape), self.w, self.b, tape)
