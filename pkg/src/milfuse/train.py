"""Training loop, evaluation, and the attention scaling benchmark.

Bags vary in size, so a "batch" is processed one bag at a time with each
bag's loss scaled by 1/batch; gradients accumulate on the parameters and
one optimizer step fires per batch. Both objective terms run every step:
the classification term sees image and caption together, the generative
term sees the image alone. The checkpoint with the best validation
accuracy (latest on ties, so the decoder keeps training after accuracy
saturates) is retained.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import AttentionConfig, exact_attention, nystrom_attention
from .data import Manifest, load_bag_features
from .errors import DivergedLossError, EmptySplitError
from .fusion import FusionMode
from .heads import LossWeights, caption_loss, classify_bag, multitask_loss
from .metrics import MetricsReport, MetricsRow, accuracy, bleu4
from .model import MILCaptionModel
from .optim import AdamW, Schedule, lr_at
from .tensor import Tensor, backward, cross_entropy_from_logits, mul, no_grad, reset_tape


@dataclass
class StepLoss:
    step: int
    loss_c: float
    loss_g: float
    loss_overall: float
    lr: float


@dataclass
class TrainOutcome:
    best_state: dict
    best_val_accuracy: float
    best_epoch: int
    final_state: dict
    report: MetricsReport
    step_log: list = field(default_factory=list)
    wall_s: float = 0.0


def _bag_tensors(data_root, bags):
    return {b.bag_id: load_bag_features(data_root, b) for b in bags}


def train_model(manifest: Manifest, data_root, cfg, log=None) -> TrainOutcome:
    """Train on the manifest's train split, selecting by validation accuracy."""
    train_bags = manifest.bags_in_split("train")
    val_bags = manifest.bags_in_split("val")
    if not train_bags:
        raise EmptySplitError("train split is empty")
    if not val_bags:
        raise EmptySplitError("val split is empty")

    model = MILCaptionModel(
        cfg, manifest.d_enc, len(manifest.vocab), manifest.num_classes, cfg.seed
    )
    features = _bag_tensors(data_root, train_bags + val_bags)
    weights = LossWeights(cfg.alpha)
    steps_per_epoch = -(-len(train_bags) // cfg.batch_size)
    schedule = Schedule(
        base_lr=cfg.lr,
        warmup_lr=cfg.warmup_lr,
        warmup_steps=min(cfg.warmup_steps, cfg.epochs * steps_per_epoch),
        total_steps=cfg.epochs * steps_per_epoch,
    )
    opt = AdamW(
        model.named_parameters(),
        lr=cfg.lr,
        betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
        eps=cfg.adam_eps,
    )
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7EA1]))

    report = MetricsReport()
    outcome = TrainOutcome(
        best_state=model.state(), best_val_accuracy=-1.0, best_epoch=-1,
        final_state={}, report=report,
    )
    t0 = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        order = [train_bags[i] for i in shuffle_rng.permutation(len(train_bags))]
        ep_c, ep_g, ep_all = [], [], []
        ep_start = time.perf_counter()
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            opt.zero_grad()
            b_c = b_g = b_all = 0.0
            for bag in batch:
                feats = Tensor(features[bag.bag_id])
                fused = model.fuse(feats, bag.caption, FusionMode.IMAGE_AND_TEXT)
                _, logits_mean = classify_bag(fused, model.head)
                l_c = cross_entropy_from_logits(logits_mean, bag.label)
                fused_io = model.fuse(feats, None, FusionMode.IMAGE_ONLY)
                l_g = caption_loss(fused_io, bag.caption, model.decoder)
                l_all = multitask_loss(l_c, l_g, weights)
                backward(mul(l_all, 1.0 / len(batch)))
                reset_tape()
                b_c += l_c.item() / len(batch)
                b_g += l_g.item() / len(batch)
                b_all += l_all.item() / len(batch)
            if not np.isfinite(b_all):
                raise DivergedLossError(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"L_C={b_c} L_G={b_g}"
                )
            lr = lr_at(step, schedule)
            opt.step(lr)
            outcome.step_log.append(StepLoss(step, b_c, b_g, b_all, lr))
            step += 1
            ep_c.append(b_c)
            ep_g.append(b_g)
            ep_all.append(b_all)

        val_acc = evaluate_split(
            model, manifest, data_root, "val", FusionMode.IMAGE_AND_TEXT,
            compute_bleu=False, features=features,
        )["accuracy"]
        wall = time.perf_counter() - ep_start
        report.add(MetricsRow(epoch=epoch, split="train",
                              loss_c=float(np.mean(ep_c)), loss_g=float(np.mean(ep_g)),
                              loss_overall=float(np.mean(ep_all)), wall_s=wall))
        report.add(MetricsRow(epoch=epoch, split="val", accuracy=val_acc))
        if val_acc >= outcome.best_val_accuracy:
            outcome.best_val_accuracy = val_acc
            outcome.best_epoch = epoch
            outcome.best_state = model.state()
        if log:
            log(
                f"epoch {epoch:3d}  loss {np.mean(ep_all):.4f} "
                f"(c {np.mean(ep_c):.4f} / g {np.mean(ep_g):.4f})  val_acc {val_acc:.3f}"
            )

    outcome.final_state = model.state()
    outcome.wall_s = time.perf_counter() - t0
    report.final = {
        "best_epoch": outcome.best_epoch,
        "best_val_accuracy": outcome.best_val_accuracy,
        "wall_s": outcome.wall_s,
        "steps": step,
    }
    return outcome


def evaluate_split(model: MILCaptionModel, manifest: Manifest, data_root,
                   split: str, mode: FusionMode, compute_bleu: bool = True,
                   max_len: int | None = None, features: dict | None = None) -> dict:
    """Accuracy (and optionally BLEU@4 of greedy captions) on one split."""
    bags = manifest.bags_in_split(split)
    if not bags:
        raise EmptySplitError(f"{split} split is empty")
    preds, labels, bleus, decoded = [], [], [], {}
    with no_grad():
        for bag in bags:
            arr = features[bag.bag_id] if features and bag.bag_id in features \
                else load_bag_features(data_root, bag)
            feats = Tensor(arr)
            caption_in = bag.caption if mode is FusionMode.IMAGE_AND_TEXT else None
            probs, _ = model.classify(feats, caption_in, mode)
            preds.append(int(np.argmax(probs.data)))
            labels.append(bag.label)
            if compute_bleu:
                hyp = model.decode_caption(feats, max_len)
                decoded[bag.bag_id] = hyp
                bleus.append(bleu4(hyp, [list(bag.caption)]))
    out = {
        "split": split,
        "mode": mode.value,
        "n_bags": len(bags),
        "accuracy": accuracy(preds, labels),
    }
    if compute_bleu:
        out["bleu4"] = float(np.mean(bleus))
        out["decoded"] = decoded
    return out


def evaluate_checkpoint(state: dict, manifest: Manifest, data_root, cfg,
                        split: str, mode: FusionMode,
                        compute_bleu: bool = True) -> dict:
    model = MILCaptionModel(
        cfg, manifest.d_enc, len(manifest.vocab), manifest.num_classes, cfg.seed
    )
    model.load_state(state)
    return evaluate_split(model, manifest, data_root, split, mode,
                          compute_bleu=compute_bleu)


def write_captions(path, decoded: dict, vocab) -> None:
    """One UTF-8 line per bag: ``<bag_id>\\t<tokens joined by spaces>``."""
    lines = [
        f"{bag_id}\t{' '.join(vocab[t] for t in ids)}"
        for bag_id, ids in sorted(decoded.items())
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Attention scaling benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchRow:
    n: int
    landmarks: int
    method: str
    wall_ms: float
    mean_rel_err: float | None

    def as_csv(self) -> str:
        err = "" if self.mean_rel_err is None else f"{self.mean_rel_err:.6f}"
        return f"{self.n},{self.landmarks},{self.method},{self.wall_ms:.3f},{err}"


BENCH_HEADER = "M,m,method,wall_ms,mean_rel_err"


def mean_row_relative_error(approx: np.ndarray, exact: np.ndarray) -> float:
    num = np.linalg.norm(approx - exact, axis=1)
    den = np.linalg.norm(exact, axis=1) + 1e-12
    return float(np.mean(num / den))


def bench_attention(sizes, landmarks: int, repeats: int, dim: int = 64,
                    seed: int = 0, pinv_iterations: int = 6) -> list:
    """Median wall time of exact vs landmark attention per bag size,
    plus the approximation's mean row-relative error."""
    from .errors import InvalidLandmarkCountError

    for n in sizes:
        if n < landmarks:
            raise InvalidLandmarkCountError(f"size {n} below landmark count {landmarks}")
    rows = []
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBE7C]))
    with no_grad():
        for n in sizes:
            q = Tensor(rng.normal(size=(n, dim)))
            k = Tensor(rng.normal(size=(n, dim)))
            v = Tensor(rng.normal(size=(n, dim)))
            cfg = AttentionConfig(
                model_dim=dim, num_heads=1, landmark_count=landmarks,
                pinv_iterations=pinv_iterations, nystrom_threshold=0,
            )
            exact_times, ny_times = [], []
            exact_out = ny_out = None
            for _ in range(repeats):
                t0 = time.perf_counter()
                exact_out = exact_attention(q, k, v)
                exact_times.append((time.perf_counter() - t0) * 1e3)
                t0 = time.perf_counter()
                ny_out = nystrom_attention(q, k, v, cfg)
                ny_times.append((time.perf_counter() - t0) * 1e3)
            err = mean_row_relative_error(ny_out.data, exact_out.data)
            rows.append(BenchRow(n, landmarks, "exact",
                                 float(np.median(exact_times)), None))
            rows.append(BenchRow(n, landmarks, "nystrom",
                                 float(np.median(ny_times)), err))
    return rows


def fitted_loglog_slope(sizes, times_ms) -> float:
    """Least-squares slope of log(time) against log(size)."""
    x = np.log(np.asarray(sizes, dtype=np.float64))
    y = np.log(np.asarray(times_ms, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])
