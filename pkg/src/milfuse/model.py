"""Full pipeline model: correlation -> projection -> fusion -> heads.

Construction order is fixed, so a given seed always produces the same
parameters. ``state()`` and ``load_state()`` move weights in and out as
plain float32 arrays for checkpointing.
"""

from __future__ import annotations

import numpy as np

from .attention import AttentionConfig, CorrelationBlock
from .errors import ShapeMismatchError
from .fusion import (
    FusionBlock,
    FusionMode,
    QueryBank,
    TextTokens,
    fusion_forward,
    project_image_features,
)
from .heads import (
    CaptionDecoder,
    ClassifierHead,
    caption_loss,
    classify_bag,
    greedy_decode,
)
from .tensor import Tensor, add, embedding_lookup, normal_param, slice_rows, zeros_param


class MILCaptionModel:
    """Bags of instance features in; class probabilities and captions out."""

    def __init__(self, cfg, d_enc: int, vocab_size: int, num_classes: int, seed: int):
        self.cfg = cfg
        self.d_enc = d_enc
        self.vocab_size = vocab_size
        self.num_classes = num_classes
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x111]))

        self.corr_cfg = AttentionConfig(
            model_dim=d_enc,
            num_heads=cfg.num_heads,
            landmark_count=cfg.landmarks,
            pinv_iterations=cfg.pinv_iterations,
            nystrom_threshold=cfg.nystrom_threshold,
        )
        self.fusion_cfg = AttentionConfig(
            model_dim=cfg.d_model,
            num_heads=cfg.num_heads,
            landmark_count=cfg.landmarks,
            pinv_iterations=cfg.pinv_iterations,
            nystrom_threshold=cfg.nystrom_threshold,
        )

        self.corr_blocks = [
            CorrelationBlock(f"corr{i}", self.corr_cfg, rng)
            for i in range(cfg.corr_layers)
        ]
        self.proj_w = normal_param("proj.w", (d_enc, cfg.d_model), rng)
        self.proj_b = zeros_param("proj.b", (cfg.d_model,))
        self.queries = QueryBank(cfg.num_queries, cfg.d_model, rng)
        self.text_tok = normal_param("text.tok", (vocab_size, cfg.d_model), rng)
        self.text_pos = normal_param("text.pos", (cfg.max_text_len, cfg.d_model), rng)
        self.fusion_blocks = [
            FusionBlock(f"fusion{i}", self.fusion_cfg, rng)
            for i in range(cfg.fusion_blocks)
        ]
        self.head = ClassifierHead(cfg.d_model, num_classes, rng)
        self.decoder = CaptionDecoder(
            vocab_size, self.fusion_cfg, cfg.decoder_blocks, cfg.max_text_len, rng
        )

    # --- parameters and checkpoint state ---

    def named_parameters(self):
        out = []
        for block in self.corr_blocks:
            out += block.named_parameters()
        out += [(self.proj_w.name, self.proj_w), (self.proj_b.name, self.proj_b)]
        out += self.queries.named_parameters()
        out += [(self.text_tok.name, self.text_tok), (self.text_pos.name, self.text_pos)]
        for block in self.fusion_blocks:
            out += block.named_parameters()
        out += self.head.named_parameters()
        out += self.decoder.named_parameters()
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ShapeMismatchError(
                f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}"
            )
        for name, p in params.items():
            arr = np.ascontiguousarray(np.asarray(state[name], dtype=p.data.dtype))
            if arr.shape != p.shape:
                raise ShapeMismatchError(
                    f"{name}: checkpoint shape {arr.shape} vs model {p.shape}"
                )
            p.data = arr

    def zero_grads(self):
        for _, p in self.named_parameters():
            p.grad = None

    # --- forward pieces ---

    def encode_image(self, feats: Tensor) -> Tensor:
        """Correlate instances and project them to the fusion width."""
        if feats.ndim != 2 or feats.shape[1] != self.d_enc:
            raise ShapeMismatchError(f"expected (*, {self.d_enc}) features, got {feats.shape}")
        e = feats
        for block in self.corr_blocks:
            e = block(e)
        return project_image_features(e, self.proj_w, self.proj_b)

    def embed_text(self, token_ids) -> TextTokens:
        ids = tuple(int(t) for t in token_ids)
        if len(ids) == 0:
            return TextTokens(ids, None)
        if len(ids) > self.cfg.max_text_len:
            raise ShapeMismatchError(
                f"caption length {len(ids)} exceeds max_text_len {self.cfg.max_text_len}"
            )
        emb = embedding_lookup(self.text_tok, ids)
        pos = slice_rows(self.text_pos, 0, len(ids))
        return TextTokens(ids, add(emb, pos))

    def fuse(self, feats: Tensor, caption_ids, mode: FusionMode) -> Tensor:
        """Image encoding plus fusion; returns the K fused query vectors."""
        image = self.encode_image(feats)
        text = None
        if mode is FusionMode.IMAGE_AND_TEXT:
            text = self.embed_text(caption_ids if caption_ids is not None else ())
        return fusion_forward(image, text, mode, self.fusion_blocks, self.queries)

    def classify(self, feats: Tensor, caption_ids, mode: FusionMode):
        """(probs, logits_mean) under the requested inference modality."""
        fused = self.fuse(feats, caption_ids, mode)
        return classify_bag(fused, self.head)

    def generative_loss(self, feats: Tensor, caption_ids) -> Tensor:
        """Teacher-forced caption loss; text never enters the fusion here."""
        fused = self.fuse(feats, None, FusionMode.IMAGE_ONLY)
        return caption_loss(fused, caption_ids, self.decoder)

    def decode_caption(self, feats: Tensor, max_len: int | None = None):
        fused = self.fuse(feats, None, FusionMode.IMAGE_ONLY)
        return greedy_decode(fused, self.decoder, max_len or self.cfg.max_text_len)
