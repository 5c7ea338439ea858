"""
Encoder-decoder network that reconstructs an interference-free IF signal
from an interfered one.

The signal is cut into overlapping segments, lifted to ``d_model`` channels,
passed through N encoder layers and N decoder layers, projected back to the
input channels and merged. Each layer is

    x1 = x + intra(norm(x)) + inter(norm(x))      dual attention
    x2 = x1 + conv_block(norm(x1))
    out = x2 + feed_forward(norm(x2))

where ``intra`` attends within a segment and ``inter`` attends across
segments at a fixed sample position. Decoder layers take queries from the
decoder stream and keys/values from the final encoder output.

Parameters live in one flat ``name -> Tensor`` mapping (see
:func:`parameter_specs`), which is also the checkpoint layout.
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass, asdict
from typing import Dict, Optional, Tuple, Union

import numpy as np

from utils.autodiff import Tensor, ArrayLike, as_tensor, take, reshape, swapaxes
from utils.math import softmax_rows, layer_norm, conv1d, sigmoid, swish
from utils.windowing import WindowConfig, SegmentStack, split_windows, merge_windows

logging.basicConfig()
logger = logging.getLogger(__name__)
logger.setLevel(logging.DEBUG)

RimformerParams = Dict[str, Tensor]

PROFILES = {
    "tiny": dict(n_layers=2, d_model=16, n_heads=2, d_k=8, d_v=8),
    "full": dict(n_layers=7, d_model=64, n_heads=4, d_k=16, d_v=16),
}
PROFILE_ALIASES = {"paper": "full"}


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 7
    d_model: int = 64
    n_heads: int = 4
    d_k: int = 16
    d_v: int = 16
    ff_expansion: int = 4
    conv_kernel: int = 15
    embed_kernel: int = 1
    n_frames: int = 63
    segment_len: int = 32
    slide: int = 16
    in_channels: int = 2
    attention: str = "dual"  # dual | flat
    use_conv_block: bool = True

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_k", "d_v", "ff_expansion", "n_frames", "segment_len", "slide", "in_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_heads * self.d_k != self.d_model or self.n_heads * self.d_v != self.d_model:
            raise ValueError(f"need n_heads*d_k == n_heads*d_v == d_model, got h={self.n_heads}, d_k={self.d_k}, d_v={self.d_v}, d_model={self.d_model}")
        if self.conv_kernel % 2 == 0 or self.embed_kernel % 2 == 0:
            raise ValueError("conv_kernel and embed_kernel must be odd")
        if self.attention not in ("dual", "flat"):
            raise ValueError(f"attention must be 'dual' or 'flat', got {self.attention}")
        # validates M <= L
        self.window

    @property
    def window(self) -> WindowConfig:
        return WindowConfig(slide=self.slide, overlap=self.segment_len - self.slide)

    @property
    def signal_len(self) -> int:
        return (self.n_frames - 1) * self.slide + self.segment_len

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_profile(cls, profile: str, signal_len: int, window: WindowConfig = WindowConfig(), in_channels: int = 2, **overrides) -> "ModelConfig":
        profile = PROFILE_ALIASES.get(profile, profile)
        if profile not in PROFILES:
            raise ValueError(f"unknown profile {profile}, expected one of {sorted(PROFILES)}")
        fields = dict(PROFILES[profile])
        fields.update({k: v for k, v in overrides.items() if v is not None})
        return cls(
            n_frames=window.n_frames(signal_len), segment_len=window.segment_len, slide=window.slide,
            in_channels=in_channels, **fields
        )


@dataclass(frozen=True)
class ParamSpec:
    shape: Tuple[int, ...]
    init: str  # kaiming | zeros | ones
    fan_in: int = 0


def _attention_specs(prefix: str, cfg: ModelConfig, length: int) -> Dict[str, ParamSpec]:
    d, h = cfg.d_model, cfg.n_heads
    return OrderedDict([
        (f"{prefix}.w_q", ParamSpec((d, h * cfg.d_k), "kaiming", d)),
        (f"{prefix}.w_k", ParamSpec((d, h * cfg.d_k), "kaiming", d)),
        (f"{prefix}.w_v", ParamSpec((d, h * cfg.d_v), "kaiming", d)),
        (f"{prefix}.w_o", ParamSpec((h * cfg.d_v, d), "kaiming", h * cfg.d_v)),
        (f"{prefix}.rel", ParamSpec((h, 2 * length - 1), "zeros")),
    ])


def _norm_specs(prefix: str, d: int) -> Dict[str, ParamSpec]:
    return OrderedDict([(f"{prefix}.gain", ParamSpec((d,), "ones")), (f"{prefix}.shift", ParamSpec((d,), "zeros"))])


def parameter_specs(cfg: ModelConfig) -> "OrderedDict[str, ParamSpec]":
    """Every parameter name with its shape and initializer, in checkpoint order."""
    d, c = cfg.d_model, cfg.in_channels
    hidden = cfg.ff_expansion * d
    specs = OrderedDict()
    specs["embed.weight"] = ParamSpec((cfg.embed_kernel, c, d), "kaiming", cfg.embed_kernel * c)
    specs["embed.bias"] = ParamSpec((d,), "zeros")
    for stack in ("encoder", "decoder"):
        for i in range(cfg.n_layers):
            p = f"{stack}.{i}"
            specs.update(_norm_specs(f"{p}.attn_norm", d))
            if cfg.attention == "dual":
                specs.update(_attention_specs(f"{p}.intra", cfg, cfg.segment_len))
                specs.update(_attention_specs(f"{p}.inter", cfg, cfg.n_frames))
            else:
                specs.update(_attention_specs(f"{p}.flat", cfg, cfg.n_frames * cfg.segment_len))
            if cfg.use_conv_block:
                specs.update(_norm_specs(f"{p}.conv_norm", d))
                specs[f"{p}.conv.pw_in.weight"] = ParamSpec((1, d, 2 * d), "kaiming", d)
                specs[f"{p}.conv.pw_in.bias"] = ParamSpec((2 * d,), "zeros")
                specs[f"{p}.conv.glu.w"] = ParamSpec((2 * d, d), "kaiming", 2 * d)
                specs[f"{p}.conv.glu.b"] = ParamSpec((d,), "zeros")
                specs[f"{p}.conv.glu.v"] = ParamSpec((2 * d, d), "kaiming", 2 * d)
                specs[f"{p}.conv.glu.c"] = ParamSpec((d,), "zeros")
                specs[f"{p}.conv.dw.weight"] = ParamSpec((cfg.conv_kernel, 1, d), "kaiming", cfg.conv_kernel)
                specs[f"{p}.conv.dw.bias"] = ParamSpec((d,), "zeros")
                specs[f"{p}.conv.pw_out.weight"] = ParamSpec((1, d, d), "kaiming", d)
                specs[f"{p}.conv.pw_out.bias"] = ParamSpec((d,), "zeros")
            specs.update(_norm_specs(f"{p}.ff_norm", d))
            specs[f"{p}.ff.w1"] = ParamSpec((d, hidden), "kaiming", d)
            specs[f"{p}.ff.b1"] = ParamSpec((hidden,), "zeros")
            specs[f"{p}.ff.w2"] = ParamSpec((hidden, d), "kaiming", hidden)
            specs[f"{p}.ff.b2"] = ParamSpec((d,), "zeros")
    specs["out_proj.weight"] = ParamSpec((1, d, c), "kaiming", d)
    specs["out_proj.bias"] = ParamSpec((c,), "zeros")
    return specs


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form parameter count.

    attention(len) = 4·D² + h·(2·len − 1)     (h·d_k = h·d_v = D)
    conv           = 7·D² + k·D + 8·D
    ff             = 2·e·D² + e·D + 3·D
    layer          = 2·D + attention + conv + ff
    total          = k_e·C·D + D + 2·N·layer + D·C + C
    """
    d, h, e, k, c = cfg.d_model, cfg.n_heads, cfg.ff_expansion, cfg.conv_kernel, cfg.in_channels

    def attention(length):
        return 4 * d * d + h * (2 * length - 1)

    if cfg.attention == "dual":
        attn = attention(cfg.segment_len) + attention(cfg.n_frames)
    else:
        attn = attention(cfg.n_frames * cfg.segment_len)
    conv = 7 * d * d + k * d + 8 * d if cfg.use_conv_block else 0
    ff = 2 * e * d * d + e * d + 3 * d
    layer = 2 * d + attn + conv + ff
    return cfg.embed_kernel * c * d + d + 2 * cfg.n_layers * layer + d * c + c


def check_params(params: RimformerParams, cfg: ModelConfig) -> None:
    """Names and shapes must be exactly those implied by ``cfg``."""
    specs = parameter_specs(cfg)
    missing = [name for name in specs if name not in params]
    extra = [name for name in params if name not in specs]
    if missing or extra:
        raise ValueError(f"parameter set does not match config: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, spec in specs.items():
        if tuple(params[name].shape) != spec.shape:
            raise ValueError(f"parameter {name} has shape {params[name].shape}, expected {spec.shape}")


def _param(params: RimformerParams, name: str) -> Tensor:
    try:
        return params[name]
    except KeyError:
        raise ValueError(f"missing parameter {name}")


# ------------------
#   Attention
# ------------------

@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    rel_table: Optional[Tensor]
    n_heads: int

    @classmethod
    def from_params(cls, params: RimformerParams, prefix: str, n_heads: int) -> "AttentionParams":
        return cls(
            w_q=_param(params, f"{prefix}.w_q"), w_k=_param(params, f"{prefix}.w_k"),
            w_v=_param(params, f"{prefix}.w_v"), w_o=_param(params, f"{prefix}.w_o"),
            rel_table=params.get(f"{prefix}.rel"), n_heads=n_heads,
        )

    def tensors(self):
        out = [self.w_q, self.w_k, self.w_v, self.w_o]
        return out if self.rel_table is None else out + [self.rel_table]


def materialize_rel(rel_table: ArrayLike, n: int, m: int) -> Tensor:
    """[h, 2·len − 1] offset table -> [h, n, m] with S[h, i, j] = table[h, j − i + len − 1]."""
    rel_table = as_tensor(rel_table)
    if rel_table.ndim != 2 or rel_table.shape[1] % 2 == 0:
        raise ValueError(f"relative table must be [h, 2*len-1], got {rel_table.shape}")
    length = (rel_table.shape[1] + 1) // 2
    if n > length or m > length:
        raise ValueError(f"relative table covers length {length}, asked for {n}x{m}")
    idx = np.arange(m)[None, :] - np.arange(n)[:, None] + length - 1
    return take(rel_table, idx, axis=1)


def _split_heads(t: Tensor, n_heads: int) -> Tensor:
    # [..., n, h*d] -> [..., h, n, d]
    shape = t.shape
    return swapaxes(reshape(t, shape[:-1] + (n_heads, shape[-1] // n_heads)), -2, -3)


def _merge_heads(t: Tensor) -> Tensor:
    # [..., h, n, d] -> [..., n, h*d]
    t = swapaxes(t, -2, -3)
    shape = t.shape
    return reshape(t, shape[:-2] + (shape[-2] * shape[-1],))


def relative_attention(x_q: ArrayLike, x_kv: ArrayLike, p: AttentionParams, return_weights: bool = False):
    """Multi-head softmax((Q·Kᵀ + S_rel) / √d_k)·V over axis -2, then ·W_o.

    Leading axes of ``x_q`` / ``x_kv`` are batch axes. With ``return_weights``
    the [..., h, n, m] attention matrices are returned as well.
    """
    x_q, x_kv = as_tensor(x_q), as_tensor(x_kv)
    for t in p.tensors():
        if not np.isfinite(t.data).all():
            raise RuntimeError("attention parameters contain non-finite values")
    d_model = p.w_q.shape[0]
    if x_q.shape[-1] != d_model or x_kv.shape[-1] != d_model or x_q.shape[:-2] != x_kv.shape[:-2]:
        raise ValueError(f"attention inputs {x_q.shape} / {x_kv.shape} incompatible with d_model={d_model}")
    if p.w_q.shape[1] % p.n_heads or p.w_v.shape[1] % p.n_heads:
        raise ValueError(f"projection widths not divisible by {p.n_heads} heads")
    d_k = p.w_q.shape[1] // p.n_heads
    n, m = x_q.shape[-2], x_kv.shape[-2]

    q = _split_heads(x_q @ p.w_q, p.n_heads)
    k = _split_heads(x_kv @ p.w_k, p.n_heads)
    v = _split_heads(x_kv @ p.w_v, p.n_heads)
    scores = q @ swapaxes(k, -1, -2)
    if p.rel_table is not None:
        scores = scores + materialize_rel(p.rel_table, n, m)
    weights = softmax_rows(scores * (1.0 / np.sqrt(d_k)))
    out = _merge_heads(weights @ v) @ p.w_o
    return (out, weights) if return_weights else out


def dual_attention_block(x: ArrayLike, kv: Optional[ArrayLike], params: RimformerParams, cfg: ModelConfig, prefix: str) -> Tensor:
    """x + intra(x̂) + inter(x̂) on [..., n_frames, segment_len, d_model].

    ``kv`` is None for self-attention, otherwise the encoder output whose
    normalized values serve as keys and values.
    """
    x = as_tensor(x)
    if x.ndim < 3 or x.shape[-1] != cfg.d_model:
        raise ValueError(f"dual attention expects [..., F, S, {cfg.d_model}], got {x.shape}")
    gain, shift = _param(params, f"{prefix}.attn_norm.gain"), _param(params, f"{prefix}.attn_norm.shift")
    x_hat = layer_norm(x, gain, shift)
    if kv is None:
        kv_hat = x_hat
    else:
        kv = as_tensor(kv)
        if kv.shape != x.shape:
            raise ValueError(f"cross-attention memory {kv.shape} differs from queries {x.shape}")
        kv_hat = layer_norm(kv, gain, shift)

    if cfg.attention == "flat":
        shape = x.shape
        flat = shape[:-3] + (shape[-3] * shape[-2], shape[-1])
        attended = relative_attention(
            reshape(x_hat, flat), reshape(kv_hat, flat), AttentionParams.from_params(params, f"{prefix}.flat", cfg.n_heads)
        )
        return x + reshape(attended, shape)

    intra = relative_attention(x_hat, kv_hat, AttentionParams.from_params(params, f"{prefix}.intra", cfg.n_heads))
    inter = relative_attention(
        swapaxes(x_hat, -2, -3), swapaxes(kv_hat, -2, -3), AttentionParams.from_params(params, f"{prefix}.inter", cfg.n_heads)
    )
    return x + intra + swapaxes(inter, -2, -3)


# ------------------
#   Convolution & feed-forward
# ------------------

def glu(x: ArrayLike, w: ArrayLike, b: ArrayLike, v: ArrayLike, c: ArrayLike) -> Tensor:
    """(x·W + b) ⊗ σ(x·V + c)."""
    x, w, b, v, c = (as_tensor(t) for t in (x, w, b, v, c))
    if w.ndim != 2 or w.shape != v.shape or w.shape[0] != x.shape[-1] or b.shape != (w.shape[1],) or c.shape != b.shape:
        raise ValueError(f"glu shapes disagree: x {x.shape}, W {w.shape}, b {b.shape}, V {v.shape}, c {c.shape}")
    return (x @ w + b) * sigmoid(x @ v + c)


@dataclass
class ConvBlockParams:
    pw_in_weight: Tensor
    pw_in_bias: Tensor
    glu_w: Tensor
    glu_b: Tensor
    glu_v: Tensor
    glu_c: Tensor
    dw_weight: Tensor
    dw_bias: Tensor
    pw_out_weight: Tensor
    pw_out_bias: Tensor

    @classmethod
    def from_params(cls, params: RimformerParams, prefix: str) -> "ConvBlockParams":
        return cls(*(
            _param(params, f"{prefix}.{name}") for name in (
                "pw_in.weight", "pw_in.bias", "glu.w", "glu.b", "glu.v", "glu.c",
                "dw.weight", "dw.bias", "pw_out.weight", "pw_out.bias",
            )
        ))


def conv_block(x: ArrayLike, p: ConvBlockParams) -> Tensor:
    """Pointwise -> GLU -> depthwise -> swish -> pointwise over the flattened
    (frame, sample) time axis. No residual."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ValueError(f"conv_block expects [..., F, S, D], got {x.shape}")
    shape = x.shape
    d = shape[-1]
    h = reshape(x, shape[:-3] + (shape[-3] * shape[-2], d))
    h = conv1d(h, p.pw_in_weight, p.pw_in_bias)
    h = glu(h, p.glu_w, p.glu_b, p.glu_v, p.glu_c)
    h = conv1d(h, p.dw_weight, p.dw_bias, groups=d)
    h = swish(h)
    h = conv1d(h, p.pw_out_weight, p.pw_out_bias)
    return reshape(h, shape)


def feed_forward(x: ArrayLike, params: RimformerParams, prefix: str) -> Tensor:
    w1, b1 = _param(params, f"{prefix}.w1"), _param(params, f"{prefix}.b1")
    w2, b2 = _param(params, f"{prefix}.w2"), _param(params, f"{prefix}.b2")
    x = as_tensor(x)
    if x.shape[-1] != w1.shape[0] or w2.shape != (w1.shape[1], w1.shape[0]):
        raise ValueError(f"feed_forward: input {x.shape} incompatible with W1 {w1.shape}, W2 {w2.shape}")
    return swish(x @ w1 + b1) @ w2 + b2


# ------------------
#   Layers & network
# ------------------

def _layer(x: Tensor, kv: Optional[Tensor], params: RimformerParams, cfg: ModelConfig, prefix: str) -> Tensor:
    x1 = dual_attention_block(x, kv, params, cfg, prefix)
    x2 = x1
    if cfg.use_conv_block:
        normed = layer_norm(x1, _param(params, f"{prefix}.conv_norm.gain"), _param(params, f"{prefix}.conv_norm.shift"))
        x2 = x1 + conv_block(normed, ConvBlockParams.from_params(params, f"{prefix}.conv"))
    normed = layer_norm(x2, _param(params, f"{prefix}.ff_norm.gain"), _param(params, f"{prefix}.ff_norm.shift"))
    return x2 + feed_forward(normed, params, f"{prefix}.ff")


def encoder_layer(x: ArrayLike, params: RimformerParams, cfg: ModelConfig, prefix: str = "encoder.0") -> Tensor:
    return _layer(as_tensor(x), None, params, cfg, prefix)


def decoder_layer(x: ArrayLike, enc_out: ArrayLike, params: RimformerParams, cfg: ModelConfig, prefix: str = "decoder.0") -> Tensor:
    return _layer(as_tensor(x), as_tensor(enc_out), params, cfg, prefix)


def embed_channels(x: Union[SegmentStack, ArrayLike], params: RimformerParams, cfg: ModelConfig) -> Tensor:
    """Lift [..., F, S, in_channels] to [..., F, S, d_model] with a conv along samples."""
    segments = x.segments if isinstance(x, SegmentStack) else as_tensor(x)
    if segments.ndim < 3 or segments.shape[-1] != cfg.in_channels or segments.shape[-2] != cfg.segment_len:
        raise ValueError(f"embed_channels expects [..., F, {cfg.segment_len}, {cfg.in_channels}], got {segments.shape}")
    return conv1d(segments, _param(params, "embed.weight"), _param(params, "embed.bias"))


def rimformer_forward(x: ArrayLike, params: RimformerParams, cfg: ModelConfig) -> Tensor:
    """Interfered [..., signal_len, in_channels] -> reconstruction of the same shape."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-1] != cfg.in_channels or x.shape[-2] != cfg.signal_len:
        raise ValueError(f"expected [..., {cfg.signal_len}, {cfg.in_channels}] input, got {x.shape}")
    stack = split_windows(x, cfg.window)

    embedded = embed_channels(stack, params, cfg)
    encoded = embedded
    for i in range(cfg.n_layers):
        encoded = encoder_layer(encoded, params, cfg, f"encoder.{i}")
    decoded = embedded
    for i in range(cfg.n_layers):
        decoded = decoder_layer(decoded, encoded, params, cfg, f"decoder.{i}")

    out = conv1d(decoded, _param(params, "out_proj.weight"), _param(params, "out_proj.bias"))
    return merge_windows(SegmentStack(out, cfg.window))
