"""Closed-form parameter and FLOP counts.

The formulas restate the architecture layer by layer and follow the FLOP
convention in :mod:`maskseg.ops` (multiply-accumulate = 2 FLOPs, elementwise
= 1 per element, norm = 4, softmax = 5, bilinear resize = 4 per output
element, pooling = 1 per input element).  Counts are for one image in
inference mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..config import ModelConfig
from ..decoder import feature_schedule


@dataclass
class CostProfile:
    total_flops: int = 0
    per_module_flops: dict = field(default_factory=dict)
    total_params: int = 0
    per_module_params: dict = field(default_factory=dict)

    def report(self) -> str:
        lines = [f"params  {self.total_params:>14,d}"]
        lines += [f"  {k:<22}{v:>14,d}" for k, v in self.per_module_params.items()]
        lines.append(f"flops   {self.total_flops:>14,d}  ({self.total_flops / 1e9:.3f} G)")
        lines += [f"  {k:<22}{v:>14,d}" for k, v in self.per_module_flops.items()]
        return "\n".join(lines)


# ------------------------------------------------------------------ params

def _conv(cin, cout, k, bias):
    return cin * cout * k * k + (cout if bias else 0)


def _linear(n_in, n_out, bias=True):
    return n_in * n_out + (n_out if bias else 0)


def classifier_params(config: ModelConfig) -> int:
    return _linear(config.hidden_dim, config.num_classes + 1, config.cls_bias)


def count_params(config: ModelConfig) -> CostProfile:
    C, P, D = config.spatial_channels, config.cp_proj_dim, config.hidden_dim
    w16, w32 = config.context_path_widths
    spatial = 0
    cin = 3
    for cout in config.spatial_widths:
        spatial += _conv(cin, cout, 3, False) + 2 * cout
        cin = cout
    context = (_conv(C, w16, 3, False) + 2 * w16 + _conv(w16, w32, 3, False) + 2 * w32
               + _conv(w32, w32, 1, False) + 2 * w32 + _conv(w16, w16, 1, False) + 2 * w16
               + _conv(w32, P, 1, True) + _conv(w16, P, 1, True))
    e = config.ffn_expansion
    block = (2 * D + 2 * _linear(D, D) + 2 * _linear(P, D)
             + 2 * D + 4 * _linear(D, D)
             + 2 * D + _linear(D, e * D) + _linear(e * D, D))
    decoder = 2 * config.num_queries * D + config.num_blocks * block
    r = C // config.ffm_reduction
    ffm = _conv(C + P, C, 3, False) + 2 * C + _linear(C, r) + _linear(r, C)
    head = ffm + 2 * D + classifier_params(config) + 2 * _linear(D, D) + _linear(D, C)
    per = {"backbone.spatial": spatial, "backbone.context": context,
           "decoder": decoder, "head": head}
    return CostProfile(total_params=sum(per.values()), per_module_params=per)


# ------------------------------------------------------------------- flops

def _conv_flops(cin, cout, k, ho, wo):
    return 2 * cout * cin * k * k * ho * wo


def _linear_flops(rows, n_in, n_out, bias=True):
    return 2 * rows * n_in * n_out + (rows * n_out if bias else 0)


def _attention_flops(N, S, D, kdim, heads):
    proj = _linear_flops(N, D, D) * 2 + _linear_flops(S, kdim, D) * 2
    scores = 2 * N * S * D + heads * N * S + 5 * heads * N * S + 2 * N * S * D
    return proj + scores


def decoder_block_flops(config: ModelConfig, S: int) -> int:
    """One decoder block attending over S positions (mask resize included)."""
    N, D, P, h = config.num_queries, config.hidden_dim, config.cp_proj_dim, config.num_heads
    e = config.ffn_expansion
    cross = 4 * N * D + N * D + S * P + _attention_flops(N, S, D, P, h) + N * D
    self_ = 4 * N * D + _attention_flops(N, N, D, D, h) + N * D
    ffn = 4 * N * D + _linear_flops(N, D, e * D) + e * N * D + _linear_flops(N, e * D, D) + N * D
    mask_resize = 4 * N * S
    return cross + self_ + ffn + mask_resize


def mask_prediction_flops(config: ModelConfig, pixels: int) -> int:
    N, D, C = config.num_queries, config.hidden_dim, config.spatial_channels
    embed = (_linear_flops(N, D, D) + N * D) * 2 + _linear_flops(N, D, C)
    return 4 * N * D + embed + 2 * N * C * pixels


def class_prediction_flops(config: ModelConfig) -> int:
    N, D = config.num_queries, config.hidden_dim
    return 4 * N * D + _linear_flops(N, D, config.num_classes + 1, config.cls_bias)


def count_flops(config: ModelConfig, height: int, width: int) -> CostProfile:
    if height % 32 or width % 32:
        raise ValueError(f"resolution {height}x{width} must be a multiple of 32")
    C, P = config.spatial_channels, config.cp_proj_dim
    w16, w32 = config.context_path_widths
    h8, w8 = height // 8, width // 8
    px8 = h8 * w8
    px16 = (height // 16) * (width // 16)
    px32 = (height // 32) * (width // 32)

    spatial = 0
    cin, ho, wo = 3, height, width
    for cout in config.spatial_widths:
        ho, wo = ho // 2, wo // 2
        spatial += _conv_flops(cin, cout, 3, ho, wo) + 5 * cout * ho * wo
        cin = cout

    def arm(c, px):
        # pool, 1x1 conv on the pooled vector, norm, sigmoid, rescale
        return c * px + 2 * c * c + 4 * c + c + c * px

    # 1/32 branch: ARM, a second pooling for the global term, the sum, projection
    context = (2 * C * w16 * 9 * px16 + 5 * w16 * px16
               + 2 * w16 * w32 * 9 * px32 + 5 * w32 * px32
               + arm(w32, px32) + 2 * w32 * px32 + 2 * w32 * P * px32
               + arm(w16, px16) + 2 * w16 * P * px16
               + 4 * P * px16 + P * px16 + 4 * P * px8)

    r = C // config.ffm_reduction
    ffm = (_conv_flops(C + P, C, 3, h8, w8) + 5 * C * px8 + C * px8
           + _linear_flops(1, C, r) + r + _linear_flops(1, r, C) + C + 2 * C * px8)

    sizes = (px32, px16, px8)
    N, D = config.num_queries, config.hidden_dim
    decoder = N * D + sum(decoder_block_flops(config, sizes[i]) for i in feature_schedule(config))
    predictions = ((config.num_blocks + 1) * mask_prediction_flops(config, px8)
                   + config.num_blocks * class_prediction_flops(config))
    per = {"backbone.spatial": spatial, "backbone.context": context, "head.ffm": ffm,
           "decoder": decoder, "head.predictions": predictions}
    params = count_params(config)
    return CostProfile(sum(per.values()), per, params.total_params, params.per_module_params)
