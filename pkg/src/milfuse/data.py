"""Bag dataset model, feature file I/O, splits, and a synthetic corpus.

Each bag is a variable-size set of instance feature rows stored in its own
binary file, plus a class label and a caption over a small closed
vocabulary. The synthetic generator plants an orthonormal per-class
direction into a random 10-30% subset of each bag's rows, which makes the
classification task learnable by construction (a nearest-centroid probe on
bag means separates the classes), and pairs every class with a caption
template whose final "variant" slot varies deterministically per bag.
Templates share a common prefix so n-gram overlap between classes is
partial rather than zero.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DimMismatchError,
    InvalidFractionsError,
    InvalidSpecError,
)
from .heads import BOS_ID, EOS_ID, PAD_ID

FEATURE_MAGIC = b"PM3F"
FEATURE_VERSION = 1
MANIFEST_VERSION = 1

SLOT = -1  # placeholder inside caption templates, filled per bag

SPLIT_NAMES = ("train", "val", "test")


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------

def write_feature_file(path, rows) -> None:
    """Write an (M, d) float32 matrix; round trips are bit-exact."""
    arr = np.ascontiguousarray(np.asarray(getattr(rows, "data", rows), dtype="<f4"))
    if arr.ndim != 2:
        raise DimMismatchError(f"feature matrix must be rank 2, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("feature rows must be finite")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes(order="C"))


def read_feature_file(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: expected magic {FEATURE_MAGIC!r}, got {blob[:4]!r}")
    version, m, d = struct.unpack_from("<III", blob, 4)
    if version != FEATURE_VERSION:
        raise BadMagicError(f"{path}: unsupported feature file version {version}")
    payload = blob[16:]
    if len(payload) != 4 * m * d:
        raise DimMismatchError(
            f"{path}: header says {m}x{d} but payload holds {len(payload) // 4} floats"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(m, d).copy()


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BagRecord:
    bag_id: str
    feature_path: str
    num_instances: int
    label: int
    caption: tuple


@dataclass
class Manifest:
    d_enc: int
    num_classes: int
    vocab: list
    bags: list = field(default_factory=list)
    splits: dict = field(default_factory=dict)  # bag_id -> split name
    version: int = MANIFEST_VERSION

    def bag_ids(self):
        return [b.bag_id for b in self.bags]

    def bags_in_split(self, split: str):
        if split not in SPLIT_NAMES:
            raise ValueError(f"unknown split {split!r}")
        return [b for b in self.bags if self.splits.get(b.bag_id) == split]

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "d_enc": self.d_enc,
            "num_classes": self.num_classes,
            "vocab": list(self.vocab),
            "bags": [
                {
                    "bag_id": b.bag_id,
                    "feature_path": b.feature_path,
                    "num_instances": b.num_instances,
                    "label": b.label,
                    "caption": list(b.caption),
                }
                for b in self.bags
            ],
            "splits": dict(sorted(self.splits.items())),
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        doc = json.loads(text)
        bags = [
            BagRecord(
                bag_id=b["bag_id"],
                feature_path=b["feature_path"],
                num_instances=int(b["num_instances"]),
                label=int(b["label"]),
                caption=tuple(int(t) for t in b["caption"]),
            )
            for b in doc["bags"]
        ]
        ids = [b.bag_id for b in bags]
        if len(set(ids)) != len(ids):
            raise InvalidSpecError("duplicate bag ids in manifest")
        return cls(
            d_enc=int(doc["d_enc"]),
            num_classes=int(doc["num_classes"]),
            vocab=list(doc["vocab"]),
            bags=bags,
            splits=dict(doc.get("splits", {})),
            version=int(doc["version"]),
        )

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Manifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def load_bag_features(data_root, bag: BagRecord) -> np.ndarray:
    arr = read_feature_file(Path(data_root) / bag.feature_path)
    if arr.shape[0] != bag.num_instances:
        raise DimMismatchError(
            f"{bag.bag_id}: manifest says {bag.num_instances} instances, "
            f"file holds {arr.shape[0]}"
        )
    return arr


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    num_bags: int
    num_classes: int
    d_enc: int
    m_range: tuple  # inclusive (min, max) instances per bag
    motif_strength: float
    noise_std: float
    vocab: tuple
    templates: tuple  # per class, token ids with one SLOT entry
    variants: tuple  # per class, candidate ids for the slot
    seed: int = 0

    def validate(self):
        if self.num_bags < 0:
            raise InvalidSpecError("num_bags must be >= 0")
        if self.num_classes < 1:
            raise InvalidSpecError("need at least one class")
        if self.m_range[0] < 1 or self.m_range[0] > self.m_range[1]:
            raise InvalidSpecError(f"bad instance range {self.m_range}")
        if self.motif_strength < 0:
            raise InvalidSpecError("motif_strength must be >= 0")
        if self.noise_std <= 0:
            raise InvalidSpecError("noise_std must be positive")
        if self.num_classes > self.d_enc:
            raise InvalidSpecError("need d_enc >= num_classes for orthonormal motifs")
        if len(self.templates) != self.num_classes or len(self.variants) != self.num_classes:
            raise InvalidSpecError("one template and variant list per class required")
        if len(set(self.templates)) != len(self.templates):
            raise InvalidSpecError("caption templates must be pairwise distinct")
        v = len(self.vocab)
        for tpl, var in zip(self.templates, self.variants):
            if sum(1 for t in tpl if t == SLOT) != 1:
                raise InvalidSpecError("each template needs exactly one slot")
            if any(t != SLOT and not 0 <= t < v for t in tpl):
                raise InvalidSpecError("template token outside vocab")
            if not var or any(not 0 <= t < v for t in var):
                raise InvalidSpecError("variant ids outside vocab")


_PREFIX_WORDS = ["section", "shows", "a", "lesion", "with"]
_BODY_WORDS = [
    ["well", "formed", "uniform", "glands", "and", "regular", "nuclei", "arranged"],
    ["moderately", "fused", "branching", "glands", "and", "crowded", "nuclei", "arranged"],
    ["poorly", "cohesive", "scattered", "cells", "and", "enlarged", "nuclei", "arranged"],
    ["papillary", "fronded", "layered", "glands", "and", "elongated", "nuclei", "arranged"],
    ["mucinous", "pooled", "dispersed", "cells", "and", "compressed", "nuclei", "arranged"],
]
_VARIANT_WORDS = ["focally", "diffusely", "centrally", "peripherally"]


def build_caption_bank(num_classes: int, vocab_size: int):
    """Vocabulary, per-class templates (shared prefix + class body + slot),
    and the shared variant word pool, all as token ids."""
    if num_classes > len(_BODY_WORDS):
        raise InvalidSpecError(f"at most {len(_BODY_WORDS)} synthetic classes supported")
    vocab = ["<pad>", "<bos>", "<eos>"]
    assert vocab[PAD_ID] == "<pad>" and vocab[BOS_ID] == "<bos>" and vocab[EOS_ID] == "<eos>"

    def intern(word: str) -> int:
        if word not in vocab:
            vocab.append(word)
        return vocab.index(word)

    prefix = [intern(w) for w in _PREFIX_WORDS]
    templates = []
    for c in range(num_classes):
        body = [intern(w) for w in _BODY_WORDS[c]]
        templates.append(tuple(prefix + body + [SLOT]))
    variant_ids = tuple(intern(w) for w in _VARIANT_WORDS)
    variants = tuple(variant_ids for _ in range(num_classes))
    if len(vocab) > vocab_size:
        raise InvalidSpecError(
            f"vocab_size {vocab_size} too small for {len(vocab)} caption words"
        )
    vocab += [f"unused{i}" for i in range(vocab_size - len(vocab))]
    return tuple(vocab), tuple(templates), variants


def desk_spec(seed: int = 0, *, num_bags: int = 300, num_classes: int = 3,
              d_enc: int = 32, m_range=(50, 200), motif_strength: float = 3.0,
              noise_std: float = 1.0, vocab_size: int = 64) -> SyntheticSpec:
    """Default desk-scale corpus: 300 bags, 3 classes, 32-wide features."""
    vocab, templates, variants = build_caption_bank(num_classes, vocab_size)
    return SyntheticSpec(
        num_bags=num_bags,
        num_classes=num_classes,
        d_enc=d_enc,
        m_range=tuple(m_range),
        motif_strength=motif_strength,
        noise_std=noise_std,
        vocab=vocab,
        templates=templates,
        variants=variants,
        seed=seed,
    )


def fill_template(spec: SyntheticSpec, bag_id: str, label: int) -> tuple:
    """Resolve the slot deterministically from (bag_id, label)."""
    pool = spec.variants[label]
    pick = pool[zlib.crc32(f"{bag_id}:{label}".encode()) % len(pool)]
    return tuple(pick if t == SLOT else t for t in spec.templates[label])


def class_directions(spec: SyntheticSpec) -> np.ndarray:
    """Fixed orthonormal motif directions, one per class (C x d_enc)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xD1]))
    raw = rng.normal(size=(spec.d_enc, spec.num_classes))
    q, _ = np.linalg.qr(raw)
    return np.ascontiguousarray(q.T[: spec.num_classes])


def generate_synthetic_corpus(spec: SyntheticSpec, out_dir) -> Manifest:
    """Write feature files and return the manifest (splits unassigned).

    Deterministic in (spec, seed): two runs produce byte-identical trees.
    Labels cycle through the classes so the corpus is exactly balanced.
    """
    spec.validate()
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    directions = class_directions(spec)
    children = np.random.SeedSequence([spec.seed, 0xB46]).spawn(max(spec.num_bags, 1))

    bags = []
    for i in range(spec.num_bags):
        rng = np.random.default_rng(children[i])
        bag_id = f"bag{i:04d}"
        label = i % spec.num_classes
        m = int(rng.integers(spec.m_range[0], spec.m_range[1] + 1))
        rows = rng.normal(0.0, spec.noise_std, size=(m, spec.d_enc))
        frac = rng.uniform(0.10, 0.30)
        hit = rng.choice(m, size=max(1, round(frac * m)), replace=False)
        rows[hit] += spec.motif_strength * directions[label]
        rel = f"features/{bag_id}.pm3f"
        write_feature_file(out_dir / rel, rows.astype("<f4"))
        bags.append(
            BagRecord(
                bag_id=bag_id,
                feature_path=rel,
                num_instances=m,
                label=label,
                caption=fill_template(spec, bag_id, label),
            )
        )
    return Manifest(
        d_enc=spec.d_enc,
        num_classes=spec.num_classes,
        vocab=list(spec.vocab),
        bags=bags,
    )


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def _cut(ids, fractions):
    n = len(ids)
    n_train = int(np.floor(n * fractions[0] + 1e-9))
    n_val = int(np.floor(n * fractions[1] + 1e-9))
    n_test = int(np.floor(n * fractions[2] + 1e-9))
    n_train += n - (n_train + n_val + n_test)  # remainder goes to train
    out = {}
    for bid in ids[:n_train]:
        out[bid] = "train"
    for bid in ids[n_train : n_train + n_val]:
        out[bid] = "val"
    for bid in ids[n_train + n_val :]:
        out[bid] = "test"
    return out


def split_dataset(manifest: Manifest, fractions, seed: int,
                  stratify: bool = False) -> Manifest:
    """Assign every bag to train/val/test by seeded shuffle + contiguous cut.

    Counts are ``floor(n * f)`` per split with the remainder going to train;
    with ``stratify`` the cut happens within each class separately.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise InvalidFractionsError(f"fractions must be three non-negatives: {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidFractionsError(f"fractions must sum to 1, got {sum(fractions)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x59117]))
    splits = {}
    if stratify:
        for c in range(manifest.num_classes):
            ids = [b.bag_id for b in manifest.bags if b.label == c]
            order = [ids[j] for j in rng.permutation(len(ids))]
            splits.update(_cut(order, fractions))
    else:
        ids = manifest.bag_ids()
        order = [ids[j] for j in rng.permutation(len(ids))]
        splits.update(_cut(order, fractions))
    return replace(manifest, splits=splits)
