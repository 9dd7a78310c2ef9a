"""Neural corrector: conv encoder, multi-head self-attention bottleneck, conv decoder.

The attention block follows plain scaled dot-product multi-head attention
with an output projection. There is no positional encoding, so it is
equivariant under permutations of the bottleneck tokens. Convolutions default
to SiLU rather than ReLU so that finite-difference checks never straddle a
kink; both map 0 to 0.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError


ACTIVATIONS = {"silu": ad.silu, "relu": ad.relu}


@dataclass(frozen=True)
class CorrectorConfig:
    base_channels: int = 32
    n_down: int = 2
    n_heads: int = 4
    d_model: int = 64
    residual: bool = False
    activation: str = "silu"  # or "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_down < 1 or self.base_channels < 1:
            raise ConfigError("n_down and base_channels must be positive")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def stage_channels(self) -> list[int]:
        return [self.base_channels * 2 ** k for k in range(self.n_down)]

    def to_dict(self):
        return asdict(self)


class Corrector:
    """Architecture bound to channel counts and grid size; weights live outside.

    All methods take a ``weights`` mapping of name -> array or autodiff node,
    so the same code is used for taped training and untaped rollouts.
    """

    def __init__(self, config: CorrectorConfig, n_ocean: int, n_forcing: int, shape):
        h, w = shape
        f = 2 ** config.n_down
        if h % f or w % f:
            raise ConfigError(f"grid {h}x{w} is not divisible by 2**n_down = {f}")
        self.config = config
        self.n_ocean = n_ocean
        self.n_forcing = n_forcing
        self.shape = (h, w)

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        cfg = self.config
        chans = cfg.stage_channels()
        shapes = {}
        c_in = self.n_ocean + self.n_forcing
        for k, c in enumerate(chans):
            c_next = chans[k + 1] if k + 1 < len(chans) else cfg.d_model
            shapes[f"enc{k}.conv.w"] = (c, c_in, 3, 3)
            shapes[f"enc{k}.conv.b"] = (c,)
            shapes[f"enc{k}.down.w"] = (c_next, c, 3, 3)
            shapes[f"enc{k}.down.b"] = (c_next,)
            c_in = c_next
        d, hds, dk = cfg.d_model, cfg.n_heads, cfg.d_k
        for name in ("q", "k", "v"):
            shapes[f"ste.w{name}"] = (hds, d, dk)
        shapes["ste.wo"] = (d, d)
        c_cur = cfg.d_model
        for k in reversed(range(len(chans))):
            c = chans[k]
            shapes[f"dec{k}.up.w"] = (c_cur, c, 2, 2)
            shapes[f"dec{k}.up.b"] = (c,)
            shapes[f"dec{k}.conv.w"] = (c, 2 * c, 3, 3)
            shapes[f"dec{k}.conv.b"] = (c,)
            c_cur = c
        shapes["out.w"] = (self.n_ocean, chans[0], 1, 1)
        shapes["out.b"] = (self.n_ocean,)
        return shapes

    def init_weights(self, rng: np.random.Generator, zero_output=False) -> dict[str, np.ndarray]:
        """Uniform in +-sqrt(1/fan_in) for kernels and projections, zero biases.

        ``zero_output`` zeroes the final 1x1 projection so the untrained
        corrector emits exactly zero (the hybrid then starts as pure physics).
        """
        weights = {}
        for name, shape in self.weight_shapes().items():
            if name.endswith(".b") or (zero_output and name == "out.w"):
                weights[name] = np.zeros(shape)
                continue
            if name.startswith("ste.w") and name != "ste.wo":
                fan_in = shape[1]
            elif name == "ste.wo":
                fan_in = shape[0]
            elif ".up." in name:
                fan_in = shape[0]
            else:
                fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(1.0 / fan_in)
            weights[name] = rng.uniform(-bound, bound, size=shape)
        return weights

    def zero_weights(self) -> dict[str, np.ndarray]:
        return {name: np.zeros(shape) for name, shape in self.weight_shapes().items()}

    def encode(self, y_norm, f_norm, weights):
        """Returns (bottleneck z, skip activations ordered shallow to deep)."""
        vy, vf = ad.value(y_norm), ad.value(f_norm)
        if vy.shape[0] != vf.shape[0] or vy.shape[2:] != vf.shape[2:] or vy.shape[2:] != self.shape:
            raise ShapeError("encode", vy.shape, vf.shape)
        x = ad.concat([y_norm, f_norm], axis=1)
        act = ACTIVATIONS[self.config.activation]
        skips = []
        for k in range(self.config.n_down):
            x = act(ad.conv2d(x, weights[f"enc{k}.conv.w"], weights[f"enc{k}.conv.b"], padding=1))
            skips.append(x)
            x = act(ad.conv2d(x, weights[f"enc{k}.down.w"], weights[f"enc{k}.down.b"],
                                  stride=2, padding=1))
        return x, skips

    def ste(self, z, weights, return_attention=False):
        """Multi-head self-attention over the flattened bottleneck tokens.

        Tokens are processed in a canonical (lexicographic) order and put
        back afterwards. The attention maths is unchanged, but every
        reduction over the token axis then sees the same operand order for
        any input permutation, making equivariance bitwise exact.
        """
        cfg = self.config
        vz = ad.value(z)
        b, d, h, w = vz.shape
        if d != cfg.d_model:
            raise ShapeError("ste", vz.shape, detail=f"expected {cfg.d_model} channels")
        n = h * w
        tokens = ad.transpose(ad.reshape(z, (b, d, n)), (0, 2, 1))  # (B, N, d)
        vt = ad.value(tokens)
        order = np.stack([np.lexsort(vt[i].T[::-1]) for i in range(b)])
        inverse = np.argsort(order, axis=1)
        offset = (np.arange(b) * n)[:, None]
        flat = ad.reshape(tokens, (b * n, d))
        x = ad.reshape(ad.take(flat, (order + offset).ravel(), axis=0), (b, 1, n, d))
        q = ad.matmul(x, weights["ste.wq"])  # (B, h, N, d_k)
        k = ad.matmul(x, weights["ste.wk"])
        v = ad.matmul(x, weights["ste.wv"])
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(cfg.d_k))
        attn = ad.softmax(scores, axis=-1)
        heads = ad.matmul(attn, v)
        merged = ad.reshape(ad.transpose(heads, (0, 2, 1, 3)), (b * n, d))
        out = ad.matmul(merged, weights["ste.wo"])
        out = ad.reshape(ad.take(out, (inverse + offset).ravel(), axis=0), (b, n, d))
        if cfg.residual:
            out = ad.add(out, tokens)
        z_out = ad.reshape(ad.transpose(out, (0, 2, 1)), (b, d, h, w))
        if return_attention:
            a = ad.value(attn)
            rows = inverse[:, None, :, None]
            cols = inverse[:, None, None, :]
            return z_out, np.take_along_axis(np.take_along_axis(a, rows, axis=2), cols, axis=3)
        return z_out

    def decode(self, z, skips, weights, mask=None):
        if len(skips) != self.config.n_down:
            raise ShapeError("decode", (len(skips),), (self.config.n_down,), detail="skip count")
        act = ACTIVATIONS[self.config.activation]
        x = z
        for k in reversed(range(self.config.n_down)):
            x = ad.upsample_conv2d(x, weights[f"dec{k}.up.w"], weights[f"dec{k}.up.b"])
            skip = skips[k]
            xs, ss = np.shape(ad.value(x)), np.shape(ad.value(skip))
            if xs[0] != ss[0] or xs[2:] != ss[2:] or ss[1] != xs[1]:
                raise ShapeError("decode", xs, ss, detail=f"skip mismatch at stage {k}")
            x = ad.concat([x, skip], axis=1)
            x = act(ad.conv2d(x, weights[f"dec{k}.conv.w"], weights[f"dec{k}.conv.b"], padding=1))
        out = ad.conv2d(x, weights["out.w"], weights["out.b"])
        if mask is not None:
            out = ad.where(mask, out, 0.0)
        return out

    def forward(self, y_norm, f_norm, weights, mask=None):
        """Normalised increment per outer step, zero on land."""
        z, skips = self.encode(y_norm, f_norm, weights)
        return self.decode(self.ste(z, weights), skips, weights, mask)
