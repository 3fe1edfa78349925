"""milfuse: bag-of-instances classification and captioning.

A self-contained pipeline over bags of instance feature vectors:

- a float32 tensor engine with reverse-mode differentiation and a
  finite-difference gradient checker,
- exact and landmark-approximated (near-linear cost) multi-head attention
  with an iterative Moore-Penrose pseudoinverse, wrapped into a residual
  instance-correlation block,
- a query-based fusion transformer joining bag features with caption
  tokens,
- classification and caption-generation heads trained jointly under an
  alpha-weighted two-term loss,
- a deterministic synthetic corpus, AdamW with warmup/cosine schedule,
  BLEU@4 evaluation, and a runtime scaling benchmark.
"""

from .attention import (
    AttentionConfig,
    CorrelationBlock,
    LandmarkSet,
    exact_attention,
    moore_penrose_pinv,
    multi_head,
    nystrom_attention,
    segment_mean_landmarks,
)
from .checkpoint import load_parameters, save_parameters
from .config import PRESETS, RunConfig, make_config
from .data import (
    BagRecord,
    Manifest,
    SyntheticSpec,
    desk_spec,
    generate_synthetic_corpus,
    read_feature_file,
    split_dataset,
    write_feature_file,
)
from .fusion import FusionMode, QueryBank, TextTokens, fusion_forward, project_image_features
from .gradcheck import GradCheckReport, grad_check
from .heads import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    CaptionDecoder,
    ClassifierHead,
    LossWeights,
    caption_loss,
    classification_loss,
    classify_bag,
    greedy_decode,
    multitask_loss,
)
from .metrics import MetricsReport, bleu4
from .model import MILCaptionModel
from .optim import AdamW, Schedule, lr_at
from .tensor import (
    Parameter,
    Tensor,
    backward,
    cross_entropy_from_logits,
    layer_norm,
    matmul,
    no_grad,
    reset_tape,
    softmax_rows,
    using_dtype,
)
from .train import bench_attention, evaluate_split, train_model

__version__ = "0.1.0"
