"""Multi-window representation fusion and the hard gate over logit routes.

One shared encoder emits an embedding per window plus one for the full
signal.  Window embeddings fuse two ways -- elementwise sum and ordered
concatenation -- and each fused view plus the full-signal view feeds its
own linear head.  A fourth route averages the three logit vectors. The
default variant routes between the four with a learnable hard
Gumbel-Softmax gate: during training one route is sampled as a one-hot
(straight-through gradients keep the gate trainable); at inference the
argmax route is taken deterministically, no sampling involved.

Route order everywhere: (add, concat, full, avg).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor

GATE_TAU = 1.0
N_ROUTES = 4
ROUTE_NAMES = ("add", "concat", "full", "avg")

VARIANTS = ("lf_avg_gate", "concat_add_concat", "concat_all", "lf_avg", "lf_coef")
DEFAULT_VARIANT = "lf_avg_gate"


def fuse_windows(embeddings: list[Tensor]) -> tuple[Tensor, Tensor]:
    """Window embeddings -> (z_add, z_concat).

    z_add is the elementwise sum (order-free, fixed width); z_concat is
    the order-preserving concatenation (width grows with window count).
    """
    if not embeddings:
        raise nm.ShapeError("fuse_windows needs at least one embedding")
    widths = {e.shape for e in embeddings}
    if len(widths) > 1 or embeddings[0].data.ndim != 1:
        raise nm.ShapeError(f"window embeddings must be equal-length vectors, got {[e.shape for e in embeddings]}")
    return nm.add_n(embeddings), nm.concat_vec(embeddings)


@dataclass(frozen=True)
class LogitBundle:
    """Per-route class logits; l_avg is the exact mean of the other three."""

    l_add: Tensor
    l_concat: Tensor
    l_full: Tensor
    l_avg: Tensor

    def routes(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return (self.l_add, self.l_concat, self.l_full, self.l_avg)


def _head(z: Tensor, params: dict, prefix: str) -> Tensor:
    w = params[f"{prefix}.w"]
    if z.shape[0] != w.shape[0]:
        raise nm.ShapeError(
            f"{prefix} head expects input width {w.shape[0]}, got {z.shape[0]} "
            f"(window count mismatch between checkpoint and data?)")
    return nm.add(nm.matmul(z, w), params[f"{prefix}.b"])


def heads_forward(z_add: Tensor, z_concat: Tensor, z_full: Tensor, params: dict) -> LogitBundle:
    """Three one-layer heads plus their logit average."""
    l_add = _head(z_add, params, "head_add")
    l_concat = _head(z_concat, params, "head_concat")
    l_full = _head(z_full, params, "head_full")
    l_avg = nm.scale(nm.add_n([l_add, l_concat, l_full]), 1.0 / 3.0)
    return LogitBundle(l_add, l_concat, l_full, l_avg)


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard Gumbel(0, 1) noise via -log(-log U)."""
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, 1e-12, 1.0 - 1e-12)))


def gumbel_gate(bundle: LogitBundle, gate_g: Tensor, training: bool,
                rng: np.random.Generator | None, tau: float = GATE_TAU) -> tuple[Tensor, int]:
    """Route selection; returns (final logits, selected route index).

    Training: perturb the gate scores with Gumbel noise, take the hard
    one-hot of softmax((g + noise) / tau), and let gradients flow through
    the soft weights (straight-through).  Inference: argmax(g), exact
    copy of that route's logits, nothing sampled.
    """
    if gate_g.shape != (N_ROUTES,):
        raise nm.ShapeError(f"gate expects {N_ROUTES} scores, got shape {gate_g.shape}")
    routes = bundle.routes()
    if not training:
        chosen = int(np.argmax(gate_g.data))
        return routes[chosen], chosen
    if rng is None:
        raise ValueError("gumbel_gate in training mode needs an explicit rng")
    noise = sample_gumbel(rng, (N_ROUTES,))
    soft = nm.softmax_rows(nm.scale(nm.add_const(gate_g, noise), 1.0 / tau))
    chosen = int(np.argmax(soft.data))
    one_hot = np.zeros(N_ROUTES, dtype=soft.data.dtype)
    one_hot[chosen] = 1.0
    w = nm.straight_through(soft, one_hot)
    logit_rows = nm.stack_rows(list(routes))
    return nm.matmul(w, logit_rows), chosen


# ---------------------------------------------------------------------------
# head construction and fusion variants

def init_fusion_params(variant: str, n_windows: int, embed_dim: int, n_classes: int,
                       rng: np.random.Generator, dtype=nm.DEFAULT_DTYPE) -> dict[str, Tensor]:
    """Heads (fan-in uniform init) and gate/coefficient scalars at zero."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown fusion variant {variant!r}; expected one of {VARIANTS}")
    if n_windows < 1 or embed_dim < 1 or n_classes < 2:
        raise ValueError(f"need n_windows >= 1, embed_dim >= 1, n_classes >= 2; "
                         f"got ({n_windows}, {embed_dim}, {n_classes})")
    concat_dim = n_windows * embed_dim
    fused_dim = embed_dim + concat_dim
    params: dict[str, Tensor] = {}

    def head(prefix: str, width: int) -> None:
        bound = 1.0 / np.sqrt(width)
        params[f"{prefix}.w"] = nm.parameter(rng.uniform(-bound, bound, (width, n_classes)), dtype=dtype)
        params[f"{prefix}.b"] = nm.parameter(np.zeros(n_classes), dtype=dtype)

    if variant == "lf_avg_gate":
        head("head_add", embed_dim)
        head("head_concat", concat_dim)
        head("head_full", embed_dim)
        params["gate.g"] = nm.parameter(np.zeros(N_ROUTES), dtype=dtype)
    elif variant == "concat_add_concat":
        head("head_fused", fused_dim)
    elif variant == "concat_all":
        head("head_all", fused_dim + embed_dim)
    elif variant == "lf_avg":
        head("head_fused", fused_dim)
        head("head_full", embed_dim)
    elif variant == "lf_coef":
        head("head_fused", fused_dim)
        head("head_full", embed_dim)
        params["coef.alpha"] = nm.parameter(np.zeros(1), dtype=dtype)
    return params


def classify(z_add: Tensor, z_concat: Tensor, z_full: Tensor, params: dict, variant: str,
             training: bool, rng: np.random.Generator | None) -> tuple[Tensor, int | None]:
    """Fused views -> (final class logits, gate route or None).

    Only the lf_avg_gate variant reports a route index; the others have
    no discrete selection to log.
    """
    if variant == "lf_avg_gate":
        bundle = heads_forward(z_add, z_concat, z_full, params)
        return gumbel_gate(bundle, params["gate.g"], training, rng)
    if variant == "concat_add_concat":
        return _head(nm.concat_vec([z_add, z_concat]), params, "head_fused"), None
    if variant == "concat_all":
        return _head(nm.concat_vec([z_add, z_concat, z_full]), params, "head_all"), None
    if variant == "lf_avg":
        l_fused = _head(nm.concat_vec([z_add, z_concat]), params, "head_fused")
        l_full = _head(z_full, params, "head_full")
        return nm.scale(nm.add(l_fused, l_full), 0.5), None
    if variant == "lf_coef":
        l_fused = _head(nm.concat_vec([z_add, z_concat]), params, "head_fused")
        l_full = _head(z_full, params, "head_full")
        # blend weights (a, 1-a) with a = sigmoid(alpha), kept inside [0, 1]
        a = nm.sigmoid(params["coef.alpha"])
        blend = nm.concat_vec([a, nm.add_const(nm.scale(a, -1.0), 1.0)])
        return nm.matmul(blend, nm.stack_rows([l_fused, l_full])), None
    raise ValueError(f"unknown fusion variant {variant!r}; expected one of {VARIANTS}")


def inference_route(params: dict, variant: str) -> int | None:
    """The route an lf_avg_gate model takes at inference (argmax of g)."""
    if variant != "lf_avg_gate":
        return None
    return int(np.argmax(params["gate.g"].data))
