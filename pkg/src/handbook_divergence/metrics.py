"""Absence, divergence, and consistency rates at question, group, and center level.

Definitions:

* absence rate of a group: absent (question, handbook) answers over all
  resolved answers routed for the group's questions;
* question divergence rate ``r_div``: Divergent + Contradictory pairs over
  non-Absent pairs of the question's matrix; ``r_con`` analogously with
  Consistent;
* group rates ``R_div`` / ``R_con``: unweighted means of the question rates
  over the group's questions that have at least one non-Absent pair;
  ``pct_div`` is the share of those questions with ``r_div > 0``;
* center rates: over every non-Absent comparison between one of the
  center's handbooks and a handbook of a different center.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Mapping, Sequence

from .corpus import QUESTION_ORGANS, Question, RoutingPlan, center_of
from .generation import GroundedAnswer
from .judge import DIVERGENT_LABELS, ComparisonMatrix, Label, PairwiseComparison

NON_ABSENT_ORDER = (Label.COMPLEMENTARY, Label.DIVERGENT, Label.CONSISTENT, Label.CONTRADICTORY)


def round_half_up(x: float, digits: int) -> float:
    q = Decimal(1).scaleb(-digits)
    return float(Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_UP))


def _mean(values: Sequence[float]) -> float | None:
    return sum(values) / len(values) if values else None


@dataclass(frozen=True)
class QuestionHeterogeneity:
    question_id: str
    n_pairs_total: int
    n_pairs_nonabsent: int
    n_divergent: int
    n_consistent: int
    r_div: float | None
    r_con: float | None

    @property
    def defined(self) -> bool:
        return self.n_pairs_nonabsent > 0

    def to_json(self) -> dict:
        return {**asdict(self), "defined": self.defined}


@dataclass(frozen=True)
class GroupHeterogeneity:
    group_id: str
    q_total: int
    q_active: int
    R_div: float | None
    R_con: float | None
    pct_div: float | None
    absence_rate: float | None = None
    n_pairs: int = 0  # routed (question, handbook) pairs, sum of |C(q)|

    @property
    def R_div_all(self) -> float | None:
        """``R_div`` re-expressed with every group question in the denominator."""
        return None if self.R_div is None else self.R_div * self.q_active / self.q_total

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CenterProfile:
    center_id: str
    n_pairs: int
    R_div: float | None
    R_con: float | None

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LabelDistribution:
    counts: dict[str, int]
    non_absent_total: int
    shares: dict[str, float | None]

    def to_json(self) -> dict:
        return asdict(self)


def absence_rate(question_ids: Iterable[str], plan: RoutingPlan,
                 answers: Mapping[tuple[str, str], GroundedAnswer]) -> float | None:
    """Absent share of resolved answers over the group's routed pairs; ``None`` if there are none.

    Missing answers (failed generation) and unresolved classifications are
    left out of both numerator and denominator.
    """
    absent = total = 0
    for qid in question_ids:
        for hid in plan.handbooks_for(qid):
            ans = answers.get((qid, hid))
            if ans is None or ans.is_absent is None:
                continue
            total += 1
            absent += ans.is_absent
    return absent / total if total else None


def question_rates(matrix: ComparisonMatrix) -> QuestionHeterogeneity:
    counts = Counter(label for _, _, label in matrix.pairs())
    n_total = matrix.n * (matrix.n - 1) // 2
    non_absent = n_total - counts[Label.ABSENT]
    n_div = counts[Label.DIVERGENT] + counts[Label.CONTRADICTORY]
    n_con = counts[Label.CONSISTENT]
    return QuestionHeterogeneity(
        question_id=matrix.question_id,
        n_pairs_total=n_total,
        n_pairs_nonabsent=non_absent,
        n_divergent=n_div,
        n_consistent=n_con,
        r_div=n_div / non_absent if non_absent else None,
        r_con=n_con / non_absent if non_absent else None,
    )


def group_rates(group_id: str, rates: Sequence[QuestionHeterogeneity], *,
                absence: float | None = None, n_pairs: int = 0) -> GroupHeterogeneity:
    defined = [r for r in rates if r.defined]
    return GroupHeterogeneity(
        group_id=group_id,
        q_total=len(rates),
        q_active=len(defined),
        R_div=_mean([r.r_div for r in defined]),
        R_con=_mean([r.r_con for r in defined]),
        pct_div=(sum(r.r_div > 0 for r in defined) / len(defined)) if defined else None,
        absence_rate=absence,
        n_pairs=n_pairs,
    )


def center_profile(center_id: str, comparisons: Iterable[PairwiseComparison]) -> CenterProfile:
    n = n_div = n_con = 0
    for c in comparisons:
        if not c.usable or c.label is Label.ABSENT:
            continue
        ca, cb = center_of(c.handbook_a), center_of(c.handbook_b)
        if ca == cb or center_id not in (ca, cb):
            continue
        n += 1
        n_div += c.label in DIVERGENT_LABELS
        n_con += c.label is Label.CONSISTENT
    return CenterProfile(center_id, n, n_div / n if n else None, n_con / n if n else None)


def distribution_from_counts(counts: Mapping[Label | str, int]) -> LabelDistribution:
    full = {label.value: 0 for label in Label}
    for k, v in counts.items():
        full[Label.parse(k).value if isinstance(k, str) else k.value] += int(v)
    non_absent = sum(v for k, v in full.items() if k != Label.ABSENT.value)
    shares = {label.value: (full[label.value] / non_absent if non_absent else None) for label in NON_ABSENT_ORDER}
    return LabelDistribution(full, non_absent, shares)


def global_distribution(comparisons: Iterable[PairwiseComparison]) -> LabelDistribution:
    return distribution_from_counts(Counter(c.label for c in comparisons if c.usable))


@dataclass
class MetricsReport:
    global_distribution: LabelDistribution
    by_question: list[QuestionHeterogeneity]
    by_organ: list[GroupHeterogeneity]
    by_topic: list[GroupHeterogeneity]
    by_center: list[CenterProfile]
    overall_absence_rate: float | None
    excluded: dict[str, int]
    config_hash: str = ""

    def to_json(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "global_distribution": self.global_distribution.to_json(),
            "overall_absence_rate": self.overall_absence_rate,
            "excluded": dict(self.excluded),
            "by_organ": [g.to_json() for g in self.by_organ],
            "by_topic": [g.to_json() for g in self.by_topic],
            "by_center": [c.to_json() for c in self.by_center],
            "by_question": [q.to_json() for q in self.by_question],
        }


def compute_metrics(questions: Sequence[Question], plan: RoutingPlan,
                    answers: Mapping[tuple[str, str], GroundedAnswer],
                    matrices: Mapping[str, ComparisonMatrix],
                    comparisons: Sequence[PairwiseComparison], *, config_hash: str = "") -> MetricsReport:
    qrates = {qid: question_rates(m) for qid, m in matrices.items()}
    by_q = [qrates[q.id] for q in sorted(questions, key=lambda q: q.id) if q.id in qrates]

    def group(gid: str, members: list[Question]) -> GroupHeterogeneity:
        ids = [q.id for q in members]
        return group_rates(gid, [qrates[i] for i in ids if i in qrates],
                           absence=absence_rate(ids, plan, answers),
                           n_pairs=sum(len(plan.handbooks_for(i)) for i in ids))

    organs = [group(o, [q for q in questions if q.organ == o])
              for o in QUESTION_ORGANS if any(q.organ == o for q in questions)]
    topics = sorted({t for q in questions for t in q.topics})
    by_topic = [group(t, [q for q in questions if t in q.topics]) for t in topics]
    centers = sorted({center_of(hid) for _, hid in plan.pairs})
    usable = [c for c in comparisons if c.usable]
    excluded = {
        "unresolved_answers": sum(1 for a in answers.values() if a.is_absent is None),
        "missing_answers": len(plan.pairs) - len(answers),
        "unusable_comparisons": len(comparisons) - len(usable),
    }
    return MetricsReport(
        global_distribution=global_distribution(usable),
        by_question=by_q,
        by_organ=organs,
        by_topic=by_topic,
        by_center=[center_profile(c, usable) for c in centers],
        overall_absence_rate=absence_rate([q.id for q in questions], plan, answers),
        excluded=excluded,
        config_hash=config_hash,
    )
