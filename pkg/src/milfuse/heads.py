"""Task heads and objectives.

Classification averages per-query logits before the softmax; captioning
runs a small causal decoder that cross-attends to the fused query vectors
and is trained with teacher forcing. The two losses combine into
``alpha * L_C + (1 - alpha) * L_G``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionConfig, FeedForward, MultiHeadWeights, multi_head
from .errors import (
    EmptyTargetError,
    NonFiniteError,
    ShapeMismatchError,
    TokenOutOfVocabError,
)
from .fusion import TextTokens
from .tensor import (
    Parameter,
    Tensor,
    add,
    cross_entropy_from_logits,
    cross_entropy_rows,
    embedding_lookup,
    layer_norm,
    matmul,
    mean_rows,
    mul,
    no_grad,
    normal_param,
    ones_param,
    reshape,
    slice_rows,
    softmax_rows,
    zeros_param,
)

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2


@dataclass(frozen=True)
class LossWeights:
    """Mixing weight between the classification and generative terms."""

    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


class ClassifierHead:
    """Shared linear map applied to each of the K fused query vectors."""

    def __init__(self, d_model: int, num_classes: int, rng, std: float = 0.02):
        if num_classes < 2:
            raise ValueError("need at least two classes")
        self.num_classes = num_classes
        self.w = normal_param("head.w", (d_model, num_classes), rng, std)
        self.b = zeros_param("head.b", (num_classes,))

    def named_parameters(self):
        return [(self.w.name, self.w), (self.b.name, self.b)]


def classify_bag(fused: Tensor, head: ClassifierHead):
    """Per-query logits, averaged into one logit vector, plus its softmax.

    Returns ``(probs, logits_mean)``; the mean over queries happens before
    the softmax.
    """
    logits = add(matmul(fused, head.w), head.b)
    logits_mean = mean_rows(logits)
    c = head.num_classes
    probs = reshape(softmax_rows(reshape(logits_mean, (1, c))), (c,))
    return probs, logits_mean


def classification_loss(logits_mean: Tensor, label: int) -> Tensor:
    """Cross-entropy of the averaged logits against the bag label."""
    return cross_entropy_from_logits(logits_mean, label)


class DecoderBlock:
    """Causal self-attention, cross-attention to the fused queries, FFN."""

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

    def __call__(self, x: Tensor, fused: Tensor, mask: Tensor) -> Tensor:
        normed = layer_norm(x, self.ln1_g, self.ln1_b, self.ln_eps)
        x = add(multi_head("exact", normed, normed, self.self_attn, self.cfg, mask=mask), x)
        normed = layer_norm(x, self.ln2_g, self.ln2_b, self.ln_eps)
        x = add(multi_head("exact", normed, fused, self.cross_attn, self.cfg), x)
        normed = layer_norm(x, self.ln3_g, self.ln3_b, self.ln_eps)
        return add(self.ffn(normed), x)


def _causal_mask(t: int) -> Tensor:
    m = np.zeros((t, t))
    m[np.triu_indices(t, k=1)] = -1e9
    return Tensor(m)


class CaptionDecoder:
    """Small causal transformer conditioned on the fused query vectors.

    The output projection starts at zero, so an untrained decoder scores
    every token uniformly and the generative loss begins at ln(vocab).
    """

    def __init__(self, vocab_size: int, cfg: AttentionConfig, num_blocks: int,
                 max_len: int, rng, std: float = 0.02):
        if vocab_size <= EOS_ID:
            raise ValueError("vocab must at least contain PAD, BOS and EOS")
        if max_len < 1:
            raise ValueError("max_len must be positive")
        d = cfg.model_dim
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.tok = normal_param("dec.tok", (vocab_size, d), rng, std)
        self.pos = normal_param("dec.pos", (max_len + 1, d), rng, std)
        self.blocks = [
            DecoderBlock(f"dec.block{i}", cfg, rng) for i in range(num_blocks)
        ]
        self.out_w = zeros_param("dec.out.w", (d, vocab_size))
        self.out_b = zeros_param("dec.out.b", (vocab_size,))

    def named_parameters(self):
        out = [(self.tok.name, self.tok), (self.pos.name, self.pos)]
        for block in self.blocks:
            out += block.named_parameters()
        out += [(self.out_w.name, self.out_w), (self.out_b.name, self.out_b)]
        return out

    def forward(self, input_ids, fused: Tensor) -> Tensor:
        """Next-token logits, one row per input position."""
        ids = list(input_ids)
        t = len(ids)
        if t == 0:
            raise EmptyTargetError("decoder needs at least one input position")
        if t > self.max_len + 1:
            raise ShapeMismatchError(f"sequence length {t} exceeds {self.max_len + 1}")
        if any(not 0 <= i < self.vocab_size for i in ids):
            raise TokenOutOfVocabError(f"token ids must lie in [0, {self.vocab_size})")
        x = add(embedding_lookup(self.tok, ids), slice_rows(self.pos, 0, t))
        mask = _causal_mask(t)
        for block in self.blocks:
            x = block(x, fused, mask)
        return add(matmul(x, self.out_w), self.out_b)


def caption_loss(fused: Tensor, target, dec: CaptionDecoder) -> Tensor:
    """Teacher-forced mean token cross-entropy.

    ``target`` holds the caption's content token ids (a ``TextTokens`` or a
    plain sequence, without BOS/EOS). The decoder input is ``[BOS] + target``
    and the prediction targets are ``target + [EOS]``; PAD positions are
    excluded from the mean. An empty caption is legal and reduces to the
    single EOS prediction.
    """
    if target is None:
        raise EmptyTargetError("caption target is required")
    ids = list(target.token_ids if isinstance(target, TextTokens) else target)
    if any(not 0 <= i < dec.vocab_size for i in ids):
        raise TokenOutOfVocabError(f"token ids must lie in [0, {dec.vocab_size})")
    logits = dec.forward([BOS_ID] + ids, fused)
    return cross_entropy_rows(logits, ids + [EOS_ID], ignore_id=PAD_ID)


def greedy_decode(fused: Tensor, dec: CaptionDecoder, max_len: int):
    """Deterministic argmax decoding from BOS; ties resolve to the lowest id.

    Returns the generated content token ids (no BOS/EOS), stopping at EOS
    or after ``max_len`` tokens.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids = [BOS_ID]
    out = []
    with no_grad():
        for _ in range(min(max_len, dec.max_len)):
            logits = dec.forward(ids, fused)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == EOS_ID:
                break
            out.append(nxt)
            ids.append(nxt)
    return out


def multitask_loss(l_c: Tensor, l_g: Tensor, weights: LossWeights) -> Tensor:
    """``alpha * L_C + (1 - alpha) * L_G``; gradients distribute linearly."""
    for name, term in (("classification", l_c), ("generative", l_g)):
        if not np.isfinite(term.data).all():
            raise NonFiniteError(f"{name} loss is not finite")
    return add(mul(l_c, weights.alpha), mul(l_g, 1.0 - weights.alpha))
