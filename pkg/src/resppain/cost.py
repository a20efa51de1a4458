"""Analytic parameter and FLOP accounting for the encoder pipeline.

Parameter formulas mirror the init code tensor-for-tensor, so the
analytic count must equal exact enumeration of an instantiated model.

FLOP conventions (forward pass, inference): a multiply-accumulate costs
2 FLOPs, softmax 5 FLOPs per element, a layer norm 8 FLOPs per element,
and a transcendental evaluation (sin/cos/gelu) 8 FLOPs.  Counts are
exact integers under these conventions.

Pipeline cost splits into a per-window fixed part (everything operating
on the latent array: Q/O projections, self-attention, FFNs, pooling) and
a per-token part (tokenization, K/V projections, attention scores and
mixing).  Attention is linear in token count, so the per-token work of
the window pass is counted over the input samples that tile the windows;
the zero-pad tail of the last window is excluded by convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .encoder import EncoderConfig, STANDARD_GRID
from .fusion import N_ROUTES, VARIANTS
from .signal import N_CLASSES

FLOPS_PER_MAC = 2
SOFTMAX_FLOPS_PER_ELEM = 5
NORM_FLOPS_PER_ELEM = 8
FUNC_FLOPS_PER_ELEM = 8

# Reference costs for the six standard layouts: millions of
# parameters and GFLOPs per window encode, used only for the deviation
# columns of the profile report.
REFERENCE_COSTS: dict[tuple[int, int, int], tuple[float, float]] = {
    (1, 1, 0): (3.62, 1.65),
    (2, 1, 0): (6.84, 3.30),
    (1, 1, 1): (7.82, 3.80),
    (1, 1, 2): (12.02, 5.94),
    (2, 1, 1): (15.24, 7.60),
    (2, 1, 2): (23.64, 11.88),
}


@dataclass(frozen=True)
class CostReport:
    config: EncoderConfig
    input_length: int
    n_windows: int
    params_total: int
    params_by_component: dict[str, int]
    flops_forward: int
    flops_by_component: dict[str, int]

    def __post_init__(self):
        if self.params_total != sum(self.params_by_component.values()):
            raise ValueError("params_by_component does not sum to params_total")
        if self.flops_forward != sum(self.flops_by_component.values()):
            raise ValueError("flops_by_component does not sum to flops_forward")


# ---------------------------------------------------------------------------
# parameters

def _linear_params(fan_in: int, fan_out: int) -> int:
    return fan_in * fan_out + fan_out


def _norm_params(dim: int) -> int:
    return 2 * dim


def _attention_params(cfg: EncoderConfig, kv_dim: int) -> int:
    d = cfg.model_dim
    return (_norm_params(d) + _norm_params(kv_dim)
            + _linear_params(d, d)        # wq
            + _linear_params(kv_dim, d)   # wk
            + _linear_params(kv_dim, d)   # wv
            + _linear_params(d, d))       # wo


def _ffn_params(cfg: EncoderConfig) -> int:
    d, e = cfg.model_dim, cfg.ffn_expansion
    return _norm_params(d) + 2 * _linear_params(d, e * d) + _linear_params(e * d, d)


def _unit_counts(cfg: EncoderConfig) -> tuple[int, int]:
    """(number of cross-attention units, number of self-attention units)."""
    crosses = cfg.depth * cfg.cross_per_block
    selfs = crosses * cfg.self_per_block
    return crosses, selfs


def _head_param_map(variant: str, n_windows: int, embed_dim: int, n_classes: int) -> dict[str, int]:
    concat_dim = n_windows * embed_dim
    fused_dim = embed_dim + concat_dim
    if variant == "lf_avg_gate":
        heads = (_linear_params(embed_dim, n_classes)
                 + _linear_params(concat_dim, n_classes)
                 + _linear_params(embed_dim, n_classes))
        return {"heads": heads, "gate": N_ROUTES}
    if variant == "concat_add_concat":
        return {"heads": _linear_params(fused_dim, n_classes), "gate": 0}
    if variant == "concat_all":
        return {"heads": _linear_params(fused_dim + embed_dim, n_classes), "gate": 0}
    if variant == "lf_avg":
        return {"heads": _linear_params(fused_dim, n_classes) + _linear_params(embed_dim, n_classes),
                "gate": 0}
    if variant == "lf_coef":
        return {"heads": _linear_params(fused_dim, n_classes) + _linear_params(embed_dim, n_classes),
                "gate": 1}
    raise ValueError(f"unknown fusion variant {variant!r}; expected one of {VARIANTS}")


def count_params(cfg: EncoderConfig, n_windows: int, n_classes: int = N_CLASSES,
                 variant: str = "lf_avg_gate") -> CostReport:
    """Closed-form parameter count; must equal model enumeration exactly."""
    if n_windows < 1:
        raise ValueError(f"n_windows must be >= 1, got {n_windows}")
    crosses, selfs = _unit_counts(cfg)
    by_component = {
        "latents": cfg.n_latents * cfg.model_dim,
        "cross_attention": crosses * _attention_params(cfg, cfg.token_dim),
        "self_attention": selfs * _attention_params(cfg, cfg.model_dim),
        "ffn": (crosses + selfs) * _ffn_params(cfg),
        "projection": _linear_params(cfg.model_dim, cfg.out_dim),
    }
    by_component.update(_head_param_map(variant, n_windows, cfg.out_dim, n_classes))
    return CostReport(config=cfg, input_length=0, n_windows=n_windows,
                      params_total=sum(by_component.values()),
                      params_by_component=by_component,
                      flops_forward=0, flops_by_component={"none": 0})


def enumerate_params(params: dict) -> int:
    """Ground-truth count: total elements across all learnable tensors."""
    return sum(int(t.data.size) for t in params.values())


# ---------------------------------------------------------------------------
# FLOPs

def encode_flops_split(cfg: EncoderConfig) -> tuple[int, int]:
    """(fixed FLOPs per encoder invocation, FLOPs per input token)."""
    n, d, e, k = cfg.n_latents, cfg.model_dim, cfg.ffn_expansion, cfg.fourier_bands
    d_in = cfg.token_dim
    crosses, selfs = _unit_counts(cfg)

    mac = FLOPS_PER_MAC
    cross_fixed = (NORM_FLOPS_PER_ELEM * n * d          # latent pre-norm
                   + mac * n * d * d + n * d            # wq
                   + mac * n * d * d + n * d            # wo
                   + n * d)                             # residual
    cross_token = (NORM_FLOPS_PER_ELEM * d_in           # token pre-norm
                   + 2 * (mac * d_in * d + d)           # wk, wv
                   + mac * n * d + n                    # scores row + scale
                   + SOFTMAX_FLOPS_PER_ELEM * n         # softmax column
                   + mac * n * d)                       # weights @ V column
    self_fixed = (2 * NORM_FLOPS_PER_ELEM * n * d   # ln_q and ln_kv, both over latents
                  + 4 * (mac * n * d * d + n * d)       # wq, wk, wv, wo
                  + mac * n * n * d + n * n             # scores + scale
                  + SOFTMAX_FLOPS_PER_ELEM * n * n
                  + mac * n * n * d                     # weights @ V
                  + n * d)                              # residual
    ffn_fixed = (NORM_FLOPS_PER_ELEM * n * d
                 + 2 * (mac * n * d * e * d + n * e * d)  # wu, wg
                 + FUNC_FLOPS_PER_ELEM * n * e * d        # gelu
                 + n * e * d                              # gating product
                 + mac * n * e * d * d + n * d            # wo
                 + n * d)                                 # residual
    token_features = (2 * k                               # phase products
                      + FUNC_FLOPS_PER_ELEM * 2 * k)      # sin and cos
    pool_proj = (n * d + d                                # mean pool
                 + mac * d * cfg.out_dim + cfg.out_dim)   # projection

    fixed = crosses * cross_fixed + selfs * self_fixed + (crosses + selfs) * ffn_fixed + pool_proj
    per_token = token_features + crosses * cross_token
    return fixed, per_token


def encode_flops(cfg: EncoderConfig, n_tokens: int) -> int:
    """Forward FLOPs for one encoder pass over n_tokens samples."""
    if n_tokens < 1:
        raise ValueError(f"n_tokens must be >= 1, got {n_tokens}")
    fixed, per_token = encode_flops_split(cfg)
    return fixed + n_tokens * per_token


def _head_flops(variant: str, n_windows: int, embed_dim: int, n_classes: int) -> tuple[int, int]:
    """(head FLOPs, gate FLOPs) for one pipeline forward."""
    mac = FLOPS_PER_MAC
    concat_dim = n_windows * embed_dim
    fused_dim = embed_dim + concat_dim

    def head(width: int) -> int:
        return mac * width * n_classes + n_classes

    if variant == "lf_avg_gate":
        heads = head(embed_dim) + head(concat_dim) + head(embed_dim)
        heads += 3 * n_classes                                   # logit average
        gate = (N_ROUTES                                         # noise add
                + N_ROUTES                                       # temperature scale
                + SOFTMAX_FLOPS_PER_ELEM * N_ROUTES
                + mac * N_ROUTES * n_classes)                    # route mixing
        return heads, gate
    if variant == "concat_add_concat":
        return head(fused_dim), 0
    if variant == "concat_all":
        return head(fused_dim + embed_dim), 0
    if variant == "lf_avg":
        return head(fused_dim) + head(embed_dim) + 2 * n_classes, 0
    if variant == "lf_coef":
        heads = head(fused_dim) + head(embed_dim)
        gate = FUNC_FLOPS_PER_ELEM + 2 + mac * 2 * n_classes     # sigmoid, blend
        return heads, gate
    raise ValueError(f"unknown fusion variant {variant!r}; expected one of {VARIANTS}")


def count_flops(cfg: EncoderConfig, input_length: int, n_windows: int,
                n_classes: int = N_CLASSES, variant: str = "lf_avg_gate") -> CostReport:
    """Forward FLOPs for the whole pipeline on one input signal.

    windows term: n_windows fixed encoder invocations whose token work
    tiles the input samples; full-signal term: one more invocation over
    all samples; plus heads and gate.  Fusion adds (z_add) are counted
    with the heads' window term.
    """
    if input_length < 1:
        raise ValueError(f"input_length must be >= 1, got {input_length}")
    if n_windows < 1:
        raise ValueError(f"n_windows must be >= 1, got {n_windows}")
    fixed, per_token = encode_flops_split(cfg)
    fuse_adds = (n_windows - 1) * cfg.out_dim   # z_add accumulation
    heads, gate = _head_flops(variant, n_windows, cfg.out_dim, n_classes)
    by_component = {
        "windows": n_windows * fixed + input_length * per_token,
        "full_signal": fixed + input_length * per_token,
        "heads": heads + fuse_adds,
        "gate": gate,
    }
    params = count_params(cfg, n_windows, n_classes, variant)
    return CostReport(config=cfg, input_length=input_length, n_windows=n_windows,
                      params_total=params.params_total,
                      params_by_component=params.params_by_component,
                      flops_forward=sum(by_component.values()),
                      flops_by_component=by_component)
