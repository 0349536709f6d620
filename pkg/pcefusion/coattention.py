"""Multi-head attention and the co-attention fusion stack.

Each fusion layer refines both branches with intra-modal self-attention and then lets them query each other with
bidirectional cross-attention. Both cross-attention blocks read the same post-self-attention tensors. Every block is
post-norm: ``norm(x + sublayer(x))``.
"""
from logging import getLogger
from typing import Dict, List, Optional, Tuple

import numpy as np

from pcefusion import tensor as T
from pcefusion.errors import DimensionError
from pcefusion.nn import LayerNorm, Linear, Module
from pcefusion.tensor import DropoutStream, Tensor

logger = getLogger(__name__)

BLOCKS = ("graph_self", "text_self", "graph_cross", "text_cross")


class ForwardContext:
    """Per-pass settings shared by every block.

    Attributes:
        training (bool): If true, dropout is active.
        dropout_rate (float): The dropout probability.
        stream (DropoutStream): Source of dropout op indices.
        attention_maps (List[Dict], optional): When not None, every attention block appends
            {"layer", "block", "weights"} here.
        layer (int): The index of the fusion layer being run.
    """

    def __init__(
        self,
        training: bool = False,
        dropout_rate: float = 0.0,
        stream: Optional[DropoutStream] = None,
        record_attention: bool = False,
    ):
        self.training: bool = training
        self.dropout_rate: float = dropout_rate
        self.stream: DropoutStream = stream or DropoutStream(0)
        self.attention_maps: Optional[List[Dict]] = [] if record_attention else None
        self.layer: int = 0

    def dropout(self, x: Tensor) -> Tensor:
        return self.stream(x, self.dropout_rate, self.training)


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    key_mask: Optional[np.ndarray] = None,
    ctx: Optional[ForwardContext] = None,
    block: str = "",
) -> Tensor:
    """Scaled dot-product attention ``softmax(Q K^T / sqrt(d_k)) V``.

    Args:
        q: Queries, shape (..., n_q, d_k).
        k: Keys, shape (..., n_k, d_k).
        v: Values, shape (..., n_k, d_v).
        key_mask: 0/1 array broadcastable to (..., n_k); masked keys receive exactly zero weight.
        ctx: Dropout settings and the optional attention recorder.
        block: A label stored with recorded attention weights.

    Raises:
        DegenerateMaskError: If every key of some row is masked.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes disagree: Q {q.shape}, K {k.shape}, V {v.shape}")
    scores = T.matmul(q, T.swap_last(k)) * (1.0 / np.sqrt(q.shape[-1]))
    mask = None if key_mask is None else np.expand_dims(np.asarray(key_mask, dtype=bool), -2)
    weights = T.softmax(scores, mask=mask)
    if ctx is not None:
        if ctx.attention_maps is not None:
            ctx.attention_maps.append(dict(layer=ctx.layer, block=block, weights=weights.data.copy()))
        weights = ctx.dropout(weights)
    return T.matmul(weights, v)


class MultiHeadAttention(Module):
    """Multi-head attention ``[M_1; ...; M_h] W_O`` with ``M_i = att(Q W_i^Q, K W_i^K, V W_i^V)``.

    The h per-head projections are stored side by side in one d_model x d_model matrix each.
    """

    def __init__(self, rng: np.random.Generator, d_model: int, num_heads: int):
        if d_model % num_heads:
            raise DimensionError(f"d_model={d_model} is not divisible by {num_heads} heads")
        self.w_q = Linear(rng, d_model, d_model, bias=False)
        self.w_k = Linear(rng, d_model, d_model, bias=False)
        self.w_v = Linear(rng, d_model, d_model, bias=False)
        self.w_o = Linear(rng, d_model, d_model, bias=False)
        self._num_heads = num_heads

    @property
    def num_heads(self) -> int:
        return self._num_heads

    def __call__(
        self,
        q: Tensor,
        k: Tensor,
        v: Tensor,
        key_mask: Optional[np.ndarray] = None,
        ctx: Optional[ForwardContext] = None,
        block: str = "",
    ) -> Tensor:
        mask = None if key_mask is None else np.expand_dims(np.asarray(key_mask), -2)
        heads = attention(
            self._split(self.w_q(q)), self._split(self.w_k(k)), self._split(self.w_v(v)), mask, ctx, block
        )
        return self.w_o(self._merge(heads))

    def _split(self, x: Tensor) -> Tensor:
        # (..., n, d_model) -> (..., h, n, d_k)
        *lead, n, d = x.shape
        x = T.reshape(x, (*lead, n, self._num_heads, d // self._num_heads))
        axes = list(range(len(lead)))
        return T.permute(x, axes + [len(lead) + 1, len(lead), len(lead) + 2])

    def _merge(self, x: Tensor) -> Tensor:
        # (..., h, n, d_k) -> (..., n, d_model)
        *lead, h, n, d_k = x.shape
        axes = list(range(len(lead)))
        x = T.permute(x, axes + [len(lead) + 1, len(lead), len(lead) + 2])
        return T.reshape(x, (*lead, n, h * d_k))


def multi_head(
    q: Tensor, k: Tensor, v: Tensor, p: MultiHeadAttention, key_mask: Optional[np.ndarray] = None
) -> Tensor:
    """Functional form of :class:`MultiHeadAttention` without dropout."""
    return p(q, k, v, key_mask)


class AttentionBlock(Module):
    """``norm(query + dropout(multi_head(query, context, context)))``."""

    def __init__(self, rng: np.random.Generator, d_model: int, num_heads: int):
        self.attn = MultiHeadAttention(rng, d_model, num_heads)
        self.norm = LayerNorm(d_model)

    def __call__(
        self,
        query: Tensor,
        context: Tensor,
        key_mask: Optional[np.ndarray],
        ctx: ForwardContext,
        block: str = "",
    ) -> Tensor:
        update = self.attn(query, context, context, key_mask, ctx, block)
        return self.norm(query + ctx.dropout(update))


class FusionLayer(Module):
    """Self-attention on each branch, then bidirectional cross-attention."""

    def __init__(self, rng: np.random.Generator, d_model: int, num_heads: int):
        self.graph_self = AttentionBlock(rng, d_model, num_heads)
        self.text_self = AttentionBlock(rng, d_model, num_heads)
        self.graph_cross = AttentionBlock(rng, d_model, num_heads)
        self.text_cross = AttentionBlock(rng, d_model, num_heads)

    def __call__(
        self,
        h_graph: Tensor,
        h_text: Tensor,
        node_mask: Optional[np.ndarray] = None,
        ctx: Optional[ForwardContext] = None,
    ) -> Tuple[Tensor, Tensor]:
        ctx = ctx or ForwardContext()
        g = self.graph_self(h_graph, h_graph, node_mask, ctx, "graph_self")
        t = self.text_self(h_text, h_text, None, ctx, "text_self")
        return (
            self.graph_cross(g, t, None, ctx, "graph_cross"),
            self.text_cross(t, g, node_mask, ctx, "text_cross"),
        )


def fusion_layer(
    h_graph: Tensor, h_text: Tensor, p: FusionLayer, node_mask: Optional[np.ndarray] = None
) -> Tuple[Tensor, Tensor]:
    """Functional form of :class:`FusionLayer` in eval mode."""
    return p(h_graph, h_text, node_mask)


class FusionStack(Module):
    """Input projections followed by ``L`` fusion layers.

    A stack with zero layers only projects its inputs; the concatenation baseline is built on it.

    Attributes:
        graph_proj (Linear): W_graph, d_node x d_model.
        text_proj (Linear): W_text, d_bert x d_model.
        layers (List[FusionLayer]): The fusion layers.
    """

    def __init__(
        self, rng: np.random.Generator, d_node: int, d_bert: int, d_model: int, num_heads: int, num_layers: int
    ):
        self.graph_proj = Linear(rng, d_node, d_model, bias=False)
        self.text_proj = Linear(rng, d_bert, d_model, bias=False)
        self.layers: List[FusionLayer] = [FusionLayer(rng, d_model, num_heads) for _ in range(num_layers)]

    def __call__(
        self,
        h_graph_raw: Tensor,
        h_text_raw: Tensor,
        node_mask: Optional[np.ndarray] = None,
        ctx: Optional[ForwardContext] = None,
    ) -> Tuple[Tensor, Tensor]:
        ctx = ctx or ForwardContext()
        h_graph, h_text = self.graph_proj(h_graph_raw), self.text_proj(h_text_raw)
        for i, layer in enumerate(self.layers):
            ctx.layer = i
            h_graph, h_text = layer(h_graph, h_text, node_mask, ctx)
        return h_graph, h_text


def fusion_stack(
    h_graph_raw: Tensor, h_text_raw: Tensor, p: FusionStack, node_mask: Optional[np.ndarray] = None
) -> Tuple[Tensor, Tensor]:
    """Functional form of :class:`FusionStack` in eval mode."""
    return p(h_graph_raw, h_text_raw, node_mask)
