"""Classification and hard-distillation losses plus teacher sources.

The training objective is

    alpha * cutmix_loss(class_logits, l1, l2, lam)
        + (1 - alpha) * cross_entropy(distill_logits, teacher_label)

where ``teacher_label`` is the argmax of the teacher's scores on the same
(augmented) images the student sees.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Protocol

import numpy as np

from titn import tensor as T
from titn.tensor import Tensor

LOGIT_CLAMP = 1e4


@dataclass
class LossConfig:
    distill_alpha: float = 0.5
    cutmix_alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.distill_alpha <= 1.0:
            raise ValueError(f"distill_alpha must lie in [0, 1], got {self.distill_alpha}")
        if not self.cutmix_alpha > 0:
            raise ValueError(f"cutmix_alpha must be positive, got {self.cutmix_alpha}")


def _labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return labels


def cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = T.as_tensor(logits)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ValueError(f"cross_entropy expects [B, M>=2] logits, got {logits.shape}")
    labels = _labels(labels, logits.shape[1])
    logp = T.log_softmax(T.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP), axis=-1)
    return -T.mean(T.pick(logp, labels))


def binary_cross_entropy(p, y) -> Tensor:
    """Mean of -(y log p + (1 - y) log(1 - p)); ``p`` is clamped to [1e-12, 1 - 1e-12]."""
    p = T.as_tensor(p)
    y = np.asarray(y, dtype=p.dtype)
    if not np.all((p.data >= 0.0) & (p.data <= 1.0)):
        raise ValueError("binary_cross_entropy: probabilities must lie in [0, 1]")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("binary_cross_entropy: targets must be 0 or 1")
    p = T.clip(p, 1e-12, 1.0 - 1e-12)
    terms = T.log(p) * y + T.log(1.0 - p) * (1.0 - y)
    return -T.mean(terms)


def cutmix_loss(logits, label_1, label_2, lam: float) -> Tensor:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return cross_entropy(logits, label_1) * lam + cross_entropy(logits, label_2) * (1.0 - lam)


def teacher_hard_label(scores) -> np.ndarray:
    """Argmax over the last axis; ties go to the lowest class index."""
    return np.argmax(np.asarray(scores), axis=-1)


def distillation_loss(class_logits, distill_logits, label_1, label_2, lam: float,
                      teacher_label, alpha: float = 0.5, parts: bool = False):
    """Hybrid CutMix + hard-distillation objective.

    With ``parts=True`` returns ``(total, base, distill)`` where ``base`` is
    the weighted CutMix term on the class head and ``distill`` the weighted
    teacher term on the distillation head; ``total == base + distill``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    base = cutmix_loss(class_logits, label_1, label_2, lam) * alpha
    distill = cross_entropy(distill_logits, teacher_label) * (1.0 - alpha)
    total = base + distill
    return (total, base, distill) if parts else total


# -- teachers ------------------------------------------------------------------------

class TeacherProvider(Protocol):
    num_classes: int

    def scores(self, images: np.ndarray, indices: np.ndarray, mix=None) -> np.ndarray:
        """Class scores ``[B, num_classes]`` for a batch.

        ``indices`` are dataset row numbers of the un-mixed samples; ``mix``
        is the :class:`~titn.augment.CutMixBatch` the images came from, if any.
        """
        ...


class FileTeacher:
    """Scores looked up by sample index from a precomputed logits matrix.

    The stored logits describe un-augmented samples, so CutMix geometry
    is ignored.
    """

    def __init__(self, logits: "TeacherLogits"):
        self.logits = logits
        self.num_classes = logits.num_classes

    def scores(self, images, indices, mix=None) -> np.ndarray:
        return self.logits.scores[np.asarray(indices)]


class CallableTeacher:
    """Wraps any in-process ``f(images) -> scores`` model."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], num_classes: int):
        self.fn = fn
        self.num_classes = num_classes

    def scores(self, images, indices, mix=None) -> np.ndarray:
        return np.asarray(self.fn(images))


class OracleTeacher:
    """Deterministic stand-in for a perfect teacher.

    Scores are the one-hot true label; on a CutMix batch the two labels are
    weighted by their surviving areas, so the hard label is whichever
    source covers more of the image.
    """

    def __init__(self, labels: np.ndarray, num_classes: int):
        self.labels = np.asarray(labels, dtype=np.int64)
        self.num_classes = num_classes

    def scores(self, images, indices, mix=None) -> np.ndarray:
        eye = np.eye(self.num_classes)
        if mix is None:
            return eye[self.labels[np.asarray(indices)]]
        return eye[mix.label_1] * mix.lam + eye[mix.label_2] * (1.0 - mix.lam)


# -- TLOG teacher-logits file -------------------------------------------------------
#
#   magic        4 bytes  b"TLOG"
#   version      u32 = 1
#   num_samples  u32
#   num_classes  u32
#   scores       num_samples * num_classes float32, row-major
#
# All fields little-endian.

TLOG_MAGIC = b"TLOG"
TLOG_VERSION = 1


class TeacherFileError(ValueError):
    pass


@dataclass
class TeacherLogits:
    scores: np.ndarray  # [num_samples, num_classes]

    @property
    def num_samples(self) -> int:
        return self.scores.shape[0]

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]

    def hard_labels(self) -> np.ndarray:
        return teacher_hard_label(self.scores)


def write_teacher_logits(path, scores: np.ndarray) -> None:
    scores = np.asarray(scores, dtype="<f4")
    if scores.ndim != 2:
        raise TeacherFileError(f"scores must be 2-d, got shape {scores.shape}")
    with open(path, "wb") as fh:
        fh.write(TLOG_MAGIC)
        fh.write(struct.pack("<III", TLOG_VERSION, *scores.shape))
        fh.write(scores.tobytes())


def read_teacher_logits(path, expected_samples: Optional[int] = None,
                        expected_classes: Optional[int] = None) -> TeacherLogits:
    """Parse and validate a TLOG file; raises :class:`TeacherFileError`."""
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise TeacherFileError(f"{path}: file too short for a header ({len(buf)} bytes)")
    if buf[:4] != TLOG_MAGIC:
        raise TeacherFileError(f"{path}: bad magic {buf[:4]!r}, expected {TLOG_MAGIC!r}")
    version, n, k = struct.unpack_from("<III", buf, 4)
    if version != TLOG_VERSION:
        raise TeacherFileError(f"{path}: unsupported version {version}")
    if k < 2:
        raise TeacherFileError(f"{path}: num_classes must be at least 2, got {k}")
    expected_bytes = 16 + 4 * n * k
    if len(buf) != expected_bytes:
        raise TeacherFileError(
            f"{path}: header declares {n}x{k} scores ({expected_bytes} bytes), file has {len(buf)}")
    scores = np.frombuffer(buf, dtype="<f4", offset=16).reshape(n, k).astype(np.float32)
    bad = np.flatnonzero(~np.isfinite(scores).all(axis=1))
    if bad.size:
        raise TeacherFileError(f"{path}: {bad.size} rows contain NaN/Inf (first at row {bad[0]})")
    if expected_samples is not None and n != expected_samples:
        raise TeacherFileError(f"{path}: {n} rows but the dataset has {expected_samples} samples")
    if expected_classes is not None and k != expected_classes:
        raise TeacherFileError(f"{path}: {k} classes but the dataset has {expected_classes}")
    return TeacherLogits(scores)
