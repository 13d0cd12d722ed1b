"""Metrics and experiment machinery: multi-class scoring, mitigation-time
statistics, pipeline breakdowns, unseen-label ablation, and report emission.

Scoring treats an unresolved session as a wrong prediction for its truth
class and no prediction for any class (it adds a pooled false negative and no
false positive).
"""
from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .corpus import HashingEmbedder, IncidentStore, KnowledgeBase
from .engine import DecliningFeedback, DiagnosisOutcome, Engine, EngineConfig
from .gateway import Gateway, PricingConfig, ReplayBackend, TokenUsage, cost
from .taxonomy import Taxonomy, TaxonomyPath
from .util import LogicalClock, round_half_up
from .verify import ScriptRegistry, SimulatedEnvironment

LEVEL_MAIN = "main"
LEVEL_LEAF = "leaf"


class EmptyInput(ValueError):
    pass


class UnknownLabel(KeyError):
    pass


@dataclass
class LabeledPrediction:
    incident_id: str
    truth: TaxonomyPath
    predicted: TaxonomyPath | None
    resolving_pipeline: int | None = None
    usage: TokenUsage = field(default_factory=TokenUsage)
    llm_invocations: int = 0
    verification_seconds: float = 0.0


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricReport:
    level: str
    per_class: dict[str, ClassScores]
    micro_f1: float
    macro_f1: float
    unresolved: int

    def to_json(self) -> dict:
        return {
            "level": self.level,
            "micro_f1": round(self.micro_f1, 6),
            "macro_f1": round(self.macro_f1, 6),
            "unresolved": self.unresolved,
            "per_class": {
                label: {
                    "precision": round(s.precision, 6),
                    "recall": round(s.recall, 6),
                    "f1": round(s.f1, 6),
                    "support": s.support,
                }
                for label, s in sorted(self.per_class.items())
            },
        }


def _label_at(path: TaxonomyPath, level: str) -> str:
    return path.main_category if level == LEVEL_MAIN else str(path)


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def score(preds: Sequence[LabeledPrediction], level: str = LEVEL_MAIN) -> MetricReport:
    """One-vs-rest precision/recall/F1 per class plus pooled micro F1."""
    if not preds:
        raise EmptyInput("no predictions to score")
    if level not in (LEVEL_MAIN, LEVEL_LEAF):
        raise ValueError(f"unknown level {level!r}")

    pairs = [
        (_label_at(p.truth, level), _label_at(p.predicted, level) if p.predicted else None)
        for p in preds
    ]
    classes = sorted({t for t, _ in pairs} | {p for _, p in pairs if p is not None})

    per_class: dict[str, ClassScores] = {}
    pooled_tp = pooled_fp = pooled_fn = 0
    for cls in classes:
        tp = sum(1 for t, p in pairs if t == cls and p == cls)
        fp = sum(1 for t, p in pairs if t != cls and p == cls)
        fn = sum(1 for t, p in pairs if t == cls and p != cls)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        per_class[cls] = ClassScores(
            precision=precision,
            recall=recall,
            f1=_f1(precision, recall),
            support=sum(1 for t, _ in pairs if t == cls),
        )
        pooled_tp += tp
        pooled_fp += fp
        pooled_fn += fn

    micro_p = pooled_tp / (pooled_tp + pooled_fp) if pooled_tp + pooled_fp else 0.0
    micro_r = pooled_tp / (pooled_tp + pooled_fn) if pooled_tp + pooled_fn else 0.0
    supported = [s.f1 for s in per_class.values() if s.support > 0]
    return MetricReport(
        level=level,
        per_class=per_class,
        micro_f1=_f1(micro_p, micro_r),
        macro_f1=sum(supported) / len(supported) if supported else 0.0,
        unresolved=sum(1 for _, p in pairs if p is None),
    )


@dataclass
class TtmStats:
    median: float
    trimmed_mean_10pct: float


def ttm_stats(durations_hours: Sequence[float]) -> TtmStats:
    """Median plus two-tailed 10% trimmed mean (floor(n/10) cut per tail)."""
    if not durations_hours:
        raise EmptyInput("no durations")
    if any(d < 0 for d in durations_hours):
        raise ValueError("durations must be non-negative")
    ordered = sorted(durations_hours)
    k = len(ordered) // 10
    trimmed = ordered[k : len(ordered) - k] if k else ordered
    return TtmStats(
        median=float(statistics.median(ordered)),
        trimmed_mean_10pct=float(sum(trimmed) / len(trimmed)),
    )


@dataclass
class BreakdownRow:
    stage: str
    resolved: float
    cumulative_pct: float

    def to_json(self) -> dict:
        return {
            "stage": self.stage,
            "resolved": round(self.resolved, 3),
            "cumulative_pct": round(self.cumulative_pct, 3),
        }


def pipeline_breakdown(runs: Sequence[Sequence[int | None]]) -> list[BreakdownRow]:
    """Cumulative resolution table averaged over repeated runs.

    Each inner sequence holds one run's per-session resolving pipeline
    (1, 2, 3, or None for escalated). Averaging over runs yields fractional
    counts.
    """
    if runs and isinstance(runs[0], (int, type(None))):
        runs = [runs]  # single run convenience
    if not runs or not runs[0]:
        raise EmptyInput("no sessions")
    totals = [len(run) for run in runs]
    counts = {1: [], 2: [], 3: []}
    for run in runs:
        counts[1].append(sum(1 for r in run if r == 1))
        counts[2].append(sum(1 for r in run if r in (1, 2)))
        counts[3].append(sum(1 for r in run if r in (1, 2, 3)))
    avg_total = sum(totals) / len(totals)
    stages = [
        ("pipeline 1", counts[1]),
        ("pipelines 1+2", counts[2]),
        ("pipelines 1+2+3", counts[3]),
    ]
    rows = []
    for stage, values in stages:
        avg = sum(values) / len(values)
        rows.append(
            BreakdownRow(stage=stage, resolved=avg, cumulative_pct=100.0 * avg / avg_total)
        )
    return rows


def label_fidelity(generated: Sequence[str], expert: Sequence[str]) -> float:
    """Agreement fraction between two label files (the fidelity spot check)."""
    if not generated or len(generated) != len(expert):
        raise EmptyInput("label lists must be non-empty and aligned")
    agree = sum(1 for g, e in zip(generated, expert) if g == e)
    return agree / len(generated)


# ---------------------------------------------------------------------------
# ablation

@dataclass
class AblationEntry:
    before_accuracy: float
    after_accuracy: float
    after_predictions_of_label: int

    def to_json(self) -> dict:
        return {
            "before_accuracy": round(self.before_accuracy, 6),
            "after_accuracy": round(self.after_accuracy, 6),
            "after_predictions_of_label": self.after_predictions_of_label,
        }


def _category_accuracy(preds: list[LabeledPrediction], label: TaxonomyPath) -> float:
    mine = [p for p in preds if str(p.truth) == str(label)]
    if not mine:
        return 0.0
    good = sum(
        1
        for p in mine
        if p.predicted is not None and p.predicted.main_category == p.truth.main_category
    )
    return good / len(mine)


def ablate_unseen(
    taxonomy: Taxonomy,
    labels_to_remove: Sequence[TaxonomyPath],
    experiment: Callable[[Taxonomy], list[LabeledPrediction]],
) -> dict[str, AblationEntry]:
    """Measure category-level accuracy for each label before/after its removal.

    ``experiment`` runs the same session set against whichever taxonomy it is
    given. Predictions of a removed label are impossible by construction (the
    ranking parser only accepts labels present in the tree).
    """
    for label in labels_to_remove:
        if taxonomy.lookup(label) is None:
            raise UnknownLabel(str(label))
    before = experiment(taxonomy)
    out: dict[str, AblationEntry] = {}
    for label in labels_to_remove:
        pruned = taxonomy.copy()
        pruned.remove_label(label)
        after = experiment(pruned)
        out[str(label)] = AblationEntry(
            before_accuracy=_category_accuracy(before, label),
            after_accuracy=_category_accuracy(after, label),
            after_predictions_of_label=sum(
                1 for p in after if p.predicted is not None and str(p.predicted) == str(label)
            ),
        )
    return out


# ---------------------------------------------------------------------------
# experiment runner

@dataclass
class CaseSpec:
    incident_id: str
    scenario: Path
    replay: Path


@dataclass
class ExperimentConfig:
    taxonomy: Path
    registry: Path
    corpus: Path
    kb: Path
    cases: list[CaseSpec]
    vectors: Path | None = None
    pricing: Path | None = None
    repetitions: int = 1
    seed: int = 0
    level: str = LEVEL_MAIN
    taxonomy_only: bool = False
    feedback_rounds: int = 1

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        raw = json.loads(path.read_text(encoding="utf-8"))
        base = path.parent

        def resolve(p):
            return (base / p).resolve() if p else None

        return cls(
            taxonomy=resolve(raw["taxonomy"]),
            registry=resolve(raw["registry"]),
            corpus=resolve(raw["corpus"]),
            kb=resolve(raw["kb"]),
            vectors=resolve(raw.get("vectors")),
            pricing=resolve(raw.get("pricing")),
            cases=[
                CaseSpec(
                    incident_id=c["incident_id"],
                    scenario=resolve(c["scenario"]),
                    replay=resolve(c["replay"]),
                )
                for c in raw["cases"]
            ],
            repetitions=int(raw.get("repetitions", 1)),
            seed=int(raw.get("seed", 0)),
            level=raw.get("level", LEVEL_MAIN),
            taxonomy_only=bool(raw.get("taxonomy_only", False)),
            feedback_rounds=int(raw.get("feedback_rounds", 1)),
        )


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    predictions: list[LabeledPrediction]
    metric: MetricReport
    breakdown: list[BreakdownRow]
    cost_usd: float | None = None
    sessions: list = field(default_factory=list)

    def report(self) -> dict:
        doc = {
            "level": self.config.level,
            "repetitions": self.config.repetitions,
            "seed": self.config.seed,
            "micro_f1": self.metric.to_json()["micro_f1"],
            "macro_f1": self.metric.to_json()["macro_f1"],
            "unresolved": self.metric.unresolved,
            "per_class": self.metric.to_json()["per_class"],
            "breakdown": [row.to_json() for row in self.breakdown],
            "cases": [
                {
                    "incident_id": p.incident_id,
                    "truth": str(p.truth),
                    "predicted": str(p.predicted) if p.predicted else None,
                    "resolving_pipeline": p.resolving_pipeline,
                    "llm_invocations": p.llm_invocations,
                    "input_tokens": p.usage.input_tokens,
                    "output_tokens": p.usage.output_tokens,
                    "verification_seconds": round_half_up(p.verification_seconds, 3),
                }
                for p in sorted(self.predictions, key=lambda p: p.incident_id)
            ],
        }
        if self.cost_usd is not None:
            doc["cost_usd"] = self.cost_usd
        return doc

    def report_bytes(self) -> bytes:
        return (json.dumps(self.report(), sort_keys=True, indent=2) + "\n").encode("utf-8")

    def table(self) -> str:
        lines = [
            f"{'incident':<12} {'truth':<44} {'predicted':<44} {'pipeline':<8}",
            "-" * 110,
        ]
        for p in sorted(self.predictions, key=lambda p: p.incident_id):
            lines.append(
                f"{p.incident_id:<12} {str(p.truth):<44} "
                f"{str(p.predicted) if p.predicted else '(unresolved)':<44} "
                f"{p.resolving_pipeline if p.resolving_pipeline else '-':<8}"
            )
        lines.append("-" * 110)
        lines.append(
            f"micro F1 = {self.metric.micro_f1:.3f}   macro F1 = {self.metric.macro_f1:.3f}   "
            f"unresolved = {self.metric.unresolved}"
        )
        for row in self.breakdown:
            lines.append(
                f"{row.stage:<18} resolved {row.resolved:.1f}  cumulative {row.cumulative_pct:.1f}%"
            )
        return "\n".join(lines)

    def csv_bytes(self) -> bytes:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(
            [
                "incident_id",
                "truth",
                "predicted",
                "resolving_pipeline",
                "llm_invocations",
                "input_tokens",
                "output_tokens",
                "verification_seconds",
            ]
        )
        for p in sorted(self.predictions, key=lambda p: p.incident_id):
            writer.writerow(
                [
                    p.incident_id,
                    str(p.truth),
                    str(p.predicted) if p.predicted else "",
                    p.resolving_pipeline if p.resolving_pipeline else "",
                    p.llm_invocations,
                    p.usage.input_tokens,
                    p.usage.output_tokens,
                    round_half_up(p.verification_seconds, 3),
                ]
            )
        return buf.getvalue().encode("utf-8")


def run_experiment(config: ExperimentConfig, keep_sessions: bool = False) -> ExperimentResult:
    provider = HashingEmbedder()
    taxonomy = Taxonomy.load_file(config.taxonomy)
    registry = ScriptRegistry.from_file(config.registry)
    store = IncidentStore.load(config.corpus, config.vectors, provider)
    kb = KnowledgeBase.load(config.kb, provider)

    predictions: list[LabeledPrediction] = []
    runs: list[list[int | None]] = []
    sessions = []
    for _ in range(config.repetitions):
        run_pipelines: list[int | None] = []
        for case in config.cases:
            record = store.get(case.incident_id)
            if record is None:
                raise UnknownLabel(f"case incident {case.incident_id} not in corpus")
            if record.root_cause is None:
                raise EmptyInput(f"case incident {case.incident_id} has no truth label")
            gateway = Gateway(ReplayBackend.from_file(case.replay), clock=LogicalClock())
            engine = Engine(
                taxonomy=taxonomy,
                store=store,
                registry=registry,
                kb=kb,
                gateway=gateway,
                env=SimulatedEnvironment.from_file(case.scenario),
                provider=provider,
                config=EngineConfig(taxonomy_only=config.taxonomy_only),
            )
            session = engine.diagnose(record, DecliningFeedback(max_rounds=config.feedback_rounds))
            outcome = session.outcome
            predicted = outcome.root_causes[0] if outcome.root_causes else None
            predictions.append(
                LabeledPrediction(
                    incident_id=record.id,
                    truth=record.root_cause,
                    predicted=predicted,
                    resolving_pipeline=outcome.resolving_pipeline,
                    usage=session.usage.totals(),
                    llm_invocations=session.usage.invocations(),
                    verification_seconds=session.verification_seconds(),
                )
            )
            run_pipelines.append(outcome.resolving_pipeline)
            if keep_sessions:
                sessions.append(session)
        runs.append(run_pipelines)

    cost_usd = None
    if config.pricing is not None:
        pricing = PricingConfig.from_file(config.pricing)
        totals: dict[str, TokenUsage] = {}
        for p in predictions:
            totals["chat-default"] = totals.get("chat-default", TokenUsage()) + p.usage
        cost_usd = cost(totals, pricing)

    return ExperimentResult(
        config=config,
        predictions=predictions,
        metric=score(predictions, config.level),
        breakdown=pipeline_breakdown(runs),
        cost_usd=cost_usd,
        sessions=sessions,
    )
