"""Trainable transformer speech encoder with a tap point at every layer.

Pre-norm blocks with GELU feed-forward and sinusoidal positions. The hidden
states after block i are the tap for the text-injection loss; the states
after the last block feed the classifier head. Attention is masked so that
appending padding frames never changes the outputs at valid positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Mask, ShapeError, Tensor

_ATTN_MASK_BIAS = -1e9


@dataclass(frozen=True)
class SpeechEncoderConfig:
    num_layers: int = 4
    d_model: int = 64
    num_heads: int = 4
    d_ff: int = 128
    feature_dim: int = 24
    max_frames: int = 256

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.d_model % self.num_heads != 0:
            raise ValueError("d_model must be divisible by num_heads")


def sinusoidal_positions(max_frames: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_frames)[:, None].astype(np.float64)
    idx = np.arange(d_model // 2)[None, :].astype(np.float64)
    angles = pos / np.power(10000.0, 2.0 * idx / d_model)
    table = np.zeros((max_frames, d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


class SpeechEncoder:
    """Stack of pre-norm transformer blocks over acoustic feature frames."""

    def __init__(self, config: SpeechEncoderConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EEC]))
        d, ff, f = config.d_model, config.d_ff, config.feature_dim

        def weight(name, rows, cols):
            w = rng.normal(0.0, rows ** -0.5, size=(rows, cols))
            self.params[name] = Tensor(w, requires_grad=True)

        def bias(name, n):
            self.params[name] = Tensor(np.zeros(n), requires_grad=True)

        def ln(name):
            self.params[f"{name}.g"] = Tensor(np.ones(d), requires_grad=True)
            self.params[f"{name}.b"] = Tensor(np.zeros(d), requires_grad=True)

        weight("in_proj.w", f, d)
        bias("in_proj.b", d)
        for i in range(config.num_layers):
            p = f"layers.{i}"
            ln(f"{p}.ln1")
            for nm in ("wq", "wk", "wv", "wo"):
                weight(f"{p}.attn.{nm}", d, d)
            for nm in ("bq", "bk", "bv", "bo"):
                bias(f"{p}.attn.{nm}", d)
            ln(f"{p}.ln2")
            weight(f"{p}.ff.w1", d, ff)
            bias(f"{p}.ff.b1", ff)
            weight(f"{p}.ff.w2", ff, d)
            bias(f"{p}.ff.b2", d)
        self._positions = sinusoidal_positions(config.max_frames, d)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def _block(self, x: Tensor, i: int, attn_bias: np.ndarray) -> Tensor:
        cfg = self.config
        p = self.params
        pre = f"layers.{i}"
        bsz, t, d = x.shape
        heads, dh = cfg.num_heads, cfg.d_model // cfg.num_heads

        h = T.layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])

        def split_heads(y):
            return T.transpose(T.reshape(y, (bsz, t, heads, dh)), (0, 2, 1, 3))

        q = split_heads(T.affine(h, p[f"{pre}.attn.wq"], p[f"{pre}.attn.bq"]))
        k = split_heads(T.affine(h, p[f"{pre}.attn.wk"], p[f"{pre}.attn.bk"]))
        v = split_heads(T.affine(h, p[f"{pre}.attn.wv"], p[f"{pre}.attn.bv"]))

        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), dh ** -0.5)
        attn = T.softmax(T.add(scores, Tensor(attn_bias)))
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (bsz, t, d))
        x = T.add(x, T.affine(ctx, p[f"{pre}.attn.wo"], p[f"{pre}.attn.bo"]))

        h2 = T.layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        inner = T.gelu(T.affine(h2, p[f"{pre}.ff.w1"], p[f"{pre}.ff.b1"]))
        return T.add(x, T.affine(inner, p[f"{pre}.ff.w2"], p[f"{pre}.ff.b2"]))

    def encode(self, features, mask, tap: int) -> tuple[Tensor, Tensor]:
        """Run the encoder; returns (final states, tap-layer states).

        Accepts a single sequence (T, F) with a Mask, or a padded batch
        (B, T, F) with a boolean (B, T) validity array. When tap equals the
        layer count the two returned tensors are the same states.
        """
        cfg = self.config
        if not (1 <= tap <= cfg.num_layers):
            raise ShapeError(f"tap layer {tap} outside 1..{cfg.num_layers}")
        feats = features if isinstance(features, Tensor) else Tensor(features)
        single = feats.ndim == 2
        if single:
            feats = T.reshape(feats, (1,) + feats.shape)
            valid = mask.valid if isinstance(mask, Mask) else np.asarray(mask, bool)
            valid = valid[None, :]
        else:
            valid = np.asarray(mask, dtype=bool)
        bsz, t, f = feats.shape
        if t == 0:
            raise ShapeError("empty sequence")
        if t > cfg.max_frames:
            raise ShapeError(f"sequence length {t} exceeds max_frames {cfg.max_frames}")
        if f != cfg.feature_dim:
            raise ShapeError(f"feature dim {f} != configured {cfg.feature_dim}")
        if valid.shape != (bsz, t):
            raise ShapeError("mask shape does not match features")
        if not valid.any(axis=1).all():
            raise ShapeError("every sequence needs at least one valid frame")

        x = T.add(
            T.affine(feats, self.params["in_proj.w"], self.params["in_proj.b"]),
            Tensor(self._positions[:t]),
        )
        attn_bias = np.where(valid, 0.0, _ATTN_MASK_BIAS)[:, None, None, :]
        tapped = None
        for i in range(cfg.num_layers):
            x = self._block(x, i, attn_bias)
            if i + 1 == tap:
                tapped = x
        final = x
        if single:
            final = T.reshape(final, final.shape[1:])
            tapped = final if tap == cfg.num_layers else T.reshape(tapped, tapped.shape[1:])
        return final, tapped
