"""Query-based fusion transformer.

A fixed bank of learnable query vectors absorbs caption tokens through
shared bidirectional self-attention and instance features through
cross-attention, block after block. Only the query rows are returned;
text rows ride along between blocks but are never consumed downstream.

Queries carry no positional encoding, so the module is equivariant under
query reordering, and cross-attention makes it invariant under instance
reordering (on the exact attention path).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .attention import AttentionConfig, FeedForward, MultiHeadWeights, multi_head
from .errors import ModeTextMismatchError, ShapeMismatchError
from .tensor import (
    Parameter,
    Tensor,
    add,
    concat_rows,
    layer_norm,
    matmul,
    normal_param,
    ones_param,
    slice_rows,
    zeros_param,
)


class FusionMode(Enum):
    IMAGE_ONLY = "image_only"
    IMAGE_AND_TEXT = "image_and_text"


@dataclass(frozen=True)
class TextTokens:
    """Caption token ids together with their embedded rows (L x d_model)."""

    token_ids: tuple
    embedded: Tensor | None

    def __len__(self):
        return len(self.token_ids)


class QueryBank:
    """K learnable query embeddings that seed the fusion stack."""

    def __init__(self, num_queries: int, d_model: int, rng, std: float = 0.02):
        if num_queries < 1 or d_model < 1:
            raise ValueError("num_queries and d_model must be positive")
        self.num_queries = num_queries
        self.d_model = d_model
        self.queries = normal_param("queries", (num_queries, d_model), rng, std)

    def named_parameters(self):
        return [(self.queries.name, self.queries)]


class FusionBlock:
    """Self-attention over [queries; text], cross-attention of queries onto
    image features, then a feed-forward over all positions. Every sublayer
    is pre-norm residual: ``x + sublayer(ln(x))``; the cross sublayer leaves
    text rows untouched."""

    def __init__(self, prefix: str, cfg: AttentionConfig, rng, ln_eps: float = 1e-5):
        self.cfg = cfg
        self.ln_eps = ln_eps
        d = cfg.model_dim
        self.ln1_g = ones_param(f"{prefix}.ln1.gamma", (d,))
        self.ln1_b = zeros_param(f"{prefix}.ln1.beta", (d,))
        self.self_attn = MultiHeadWeights.create(f"{prefix}.self", d, rng)
        self.ln2_g = ones_param(f"{prefix}.ln2.gamma", (d,))
        self.ln2_b = zeros_param(f"{prefix}.ln2.beta", (d,))
        self.cross_attn = MultiHeadWeights.create(f"{prefix}.cross", d, rng)
        self.ln3_g = ones_param(f"{prefix}.ln3.gamma", (d,))
        self.ln3_b = zeros_param(f"{prefix}.ln3.beta", (d,))
        self.ffn = FeedForward.create(f"{prefix}.ffn", d, rng)

    def named_parameters(self):
        out = [(self.ln1_g.name, self.ln1_g), (self.ln1_b.name, self.ln1_b)]
        out += self.self_attn.named_parameters()
        out += [(self.ln2_g.name, self.ln2_g), (self.ln2_b.name, self.ln2_b)]
        out += self.cross_attn.named_parameters()
        out += [(self.ln3_g.name, self.ln3_g), (self.ln3_b.name, self.ln3_b)]
        out += self.ffn.named_parameters()
        return out

    def __call__(self, x: Tensor, image_feats: Tensor, n_queries: int) -> Tensor:
        normed = layer_norm(x, self.ln1_g, self.ln1_b, self.ln_eps)
        x = add(multi_head("exact", normed, normed, self.self_attn, self.cfg), x)

        normed = layer_norm(x, self.ln2_g, self.ln2_b, self.ln_eps)
        q_in = normed if x.shape[0] == n_queries else slice_rows(normed, 0, n_queries)
        cross = multi_head("exact", q_in, image_feats, self.cross_attn, self.cfg)
        if x.shape[0] == n_queries:
            x = add(cross, x)
        else:
            q_rows = add(cross, slice_rows(x, 0, n_queries))
            x = concat_rows([q_rows, slice_rows(x, n_queries, x.shape[0])])

        normed = layer_norm(x, self.ln3_g, self.ln3_b, self.ln_eps)
        return add(self.ffn(normed), x)


def project_image_features(e: Tensor, w: Parameter, b: Parameter) -> Tensor:
    """Row-wise affine map from encoder width to fusion width."""
    if e.ndim != 2 or e.shape[1] != w.shape[0]:
        raise ShapeMismatchError(f"cannot project {e.shape} with {w.shape}")
    return add(matmul(e, w), b)


def fusion_forward(image_feats: Tensor, text: TextTokens | None, mode: FusionMode,
                   blocks, qb: QueryBank) -> Tensor:
    """Run the fusion stack and return the K fused query rows.

    ``image_feats`` must already be correlated and projected to the fusion
    width. In IMAGE_AND_TEXT mode the caption rows join the queries in
    self-attention; an empty token list degenerates to IMAGE_ONLY.
    """
    if mode is FusionMode.IMAGE_AND_TEXT and text is None:
        raise ModeTextMismatchError("image_and_text mode requires text tokens")
    if mode is FusionMode.IMAGE_ONLY and text is not None and len(text) > 0:
        raise ModeTextMismatchError("image_only mode forbids text tokens")
    if image_feats.ndim != 2 or image_feats.shape[1] != qb.d_model:
        raise ShapeMismatchError(
            f"image features {image_feats.shape} do not match width {qb.d_model}"
        )
    k = qb.num_queries
    has_text = mode is FusionMode.IMAGE_AND_TEXT and len(text) > 0
    x = concat_rows([qb.queries, text.embedded]) if has_text else qb.queries
    for block in blocks:
        x = block(x, image_feats, k)
    return slice_rows(x, 0, k)
