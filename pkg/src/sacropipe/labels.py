"""Sacroiliitis grading rules, reader consensus, and dataset splitting."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ProtocolError, SplitError
from .manifest import Manifest

MAX_GRADE = 4


def _check_grade(g) -> int:
    if isinstance(g, bool) or not isinstance(g, (int, np.integer, float)) \
            or int(g) != g or not 0 <= g <= MAX_GRADE:
        raise DomainError(f"sacroiliitis grade must be an integer in 0..{MAX_GRADE}, got {g!r}")
    return int(g)


def mny_positive(grade_left: int, grade_right: int) -> bool:
    """Modified New York radiographic criterion.

    Definite sacroiliitis is bilateral grade >= 2 or unilateral grade 3-4.
    """
    left, right = _check_grade(grade_left), _check_grade(grade_right)
    return (left >= 2 and right >= 2) or left >= 3 or right >= 3


class Provenance(str, enum.Enum):
    SINGLE_READER = "single-reader"
    TWO_OF_THREE = "two-of-three"
    PAIR_CONSENSUS = "pair-consensus"
    ADJUDICATED = "adjudicated"


@dataclass(frozen=True)
class GradingRecord:
    reader_id: str
    grade_left: int
    grade_right: int

    def __post_init__(self):
        _check_grade(self.grade_left)
        _check_grade(self.grade_right)

    @property
    def positive(self) -> bool:
        return mny_positive(self.grade_left, self.grade_right)


@dataclass(frozen=True)
class StudyLabel:
    positive: bool
    provenance: Provenance
    needs_adjudication: bool = False


def _binary(x, name) -> int:
    if x not in (0, 1, True, False):
        raise DomainError(f"{name} must be binary, got {x!r}")
    return int(x)


def adjudicate_proof(local, central1, central2=None) -> StudyLabel:
    """Local read + blinded central read; a second central read breaks disagreements."""
    local = _binary(local, "local")
    central1 = _binary(central1, "central1")
    if local == central1:
        if central2 is not None:
            raise ProtocolError("second central read is only taken on disagreement")
        return StudyLabel(bool(local), Provenance.TWO_OF_THREE)
    if central2 is None:
        raise ProtocolError("local and central reads disagree; a second central read is required")
    central2 = _binary(central2, "central2")
    votes = local + central1 + central2
    return StudyLabel(votes >= 2, Provenance.ADJUDICATED)


def two_of_three(a, b, c) -> StudyLabel:
    """Independent triple read, majority decides."""
    votes = _binary(a, "a") + _binary(b, "b") + _binary(c, "c")
    return StudyLabel(votes >= 2, Provenance.TWO_OF_THREE)


def pair_consensus(a, b) -> StudyLabel:
    """Two-reader consensus. Disagreement is flagged, never resolved here."""
    a, b = _binary(a, "a"), _binary(b, "b")
    return StudyLabel(bool(a and b), Provenance.PAIR_CONSENSUS, needs_adjudication=a != b)


def label_from_records(records: list[GradingRecord]) -> StudyLabel:
    if not records:
        raise ProtocolError("no grading records")
    calls = [int(r.positive) for r in records]
    if len(calls) == 1:
        return StudyLabel(bool(calls[0]), Provenance.SINGLE_READER)
    if len(calls) == 2:
        return pair_consensus(*calls)
    if len(calls) == 3:
        return two_of_three(*calls)
    raise ProtocolError(f"unsupported number of readers: {len(calls)}")


def validation_size(n: int, val_fraction: float) -> int:
    # round half up; 1483 * 0.15 = 222.45 -> 222
    return int(math.floor(n * val_fraction + 0.5))


def split_dataset(manifest: Manifest, val_fraction: float, seed: int) -> tuple[Manifest, Manifest]:
    """Random train/validation split, independent of the manifest's entry order."""
    if not 0 < val_fraction < 1:
        raise SplitError("val_fraction must lie strictly between 0 and 1")
    n = len(manifest)
    if n < 2:
        raise SplitError("need at least two samples to split")
    n_val = min(max(validation_size(n, val_fraction), 1), n - 1)
    ordered = sorted(manifest.entries, key=lambda e: e.sample_id)
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = set(perm[:n_val].tolist())
    train = [e for i, e in enumerate(ordered) if i not in val_idx]
    val = [e for i, e in enumerate(ordered) if i in val_idx]
    return manifest.with_entries(train), manifest.with_entries(val)
