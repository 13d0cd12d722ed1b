from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from infradiag.corpus import HashingEmbedder, IncidentStore, KnowledgeBase
from infradiag.engine import DecliningFeedback, Engine, EngineConfig
from infradiag.evalkit import (
    EmptyInput,
    LabeledPrediction,
    UnknownLabel,
    ablate_unseen,
    label_fidelity,
    pipeline_breakdown,
    score,
    ttm_stats,
)
from infradiag.gateway import Gateway
from infradiag.synthetic import OracleBackend, OracleContext, build_kb, scenario_for
from infradiag.taxonomy import TaxonomyPath
from infradiag.util import LogicalClock
from infradiag.verify import SimulatedEnvironment


def pred(truth: str, predicted: str | None, pipeline: int | None = 1) -> LabeledPrediction:
    return LabeledPrediction(
        incident_id=f"i{random.random()}",
        truth=TaxonomyPath.parse(truth),
        predicted=TaxonomyPath.parse(predicted) if predicted else None,
        resolving_pipeline=pipeline,
    )


class TestScore:
    def test_all_correct_gives_ones(self):
        preds = [pred("GPU.A.x", "GPU.A.x"), pred("Other.B.y", "Other.B.y")]
        report = score(preds, level="leaf")
        assert report.micro_f1 == 1.0 and report.macro_f1 == 1.0
        assert report.unresolved == 0

    def test_hand_built_confusion_matrix(self):
        # truths [A, A, B], predictions [A, B, B]
        preds = [pred("A", "A"), pred("A", "B"), pred("B", "B")]
        report = score(preds, level="main")
        assert report.micro_f1 == pytest.approx(0.667, abs=1e-3)
        assert report.per_class["A"].f1 == pytest.approx(0.667, abs=1e-3)
        assert report.per_class["B"].f1 == pytest.approx(0.667, abs=1e-3)
        assert report.macro_f1 == pytest.approx(0.667, abs=1e-3)

    def test_no_predictions_at_all(self):
        preds = [pred("A", None, None), pred("B", None, None)]
        report = score(preds, level="main")
        assert report.micro_f1 == 0.0 and report.macro_f1 == 0.0
        assert report.unresolved == 2

    def test_unresolved_costs_recall_not_precision(self):
        preds = [pred("A", "A"), pred("A", None, None)]
        report = score(preds, level="main")
        cls = report.per_class["A"]
        assert cls.precision == 1.0
        assert cls.recall == 0.5

    def test_micro_equals_accuracy_when_everything_predicted(self):
        rng = random.Random(5)
        labels = ["A", "B", "C", "D"]
        preds = [
            pred(rng.choice(labels), rng.choice(labels)) for _ in range(100)
        ]
        report = score(preds, level="main")
        accuracy = sum(1 for p in preds if str(p.predicted) == str(p.truth)) / len(preds)
        assert report.micro_f1 == pytest.approx(accuracy, abs=1e-12)

    def test_level_truncation(self):
        preds = [pred("GPU.A.x", "GPU.B.y")]
        assert score(preds, level="main").micro_f1 == 1.0
        assert score(preds, level="leaf").micro_f1 == 0.0

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            score([])


class TestTtm:
    def test_one_to_ten(self):
        stats = ttm_stats(list(range(1, 11)))
        assert stats.median == 5.5
        assert stats.trimmed_mean_10pct == 5.5

    def test_single_value(self):
        stats = ttm_stats([7.0])
        assert (stats.median, stats.trimmed_mean_10pct) == (7.0, 7.0)

    def test_outlier_trimmed_from_each_tail(self):
        stats = ttm_stats([0.0] * 9 + [100.0])
        assert stats.median == 0.0
        assert stats.trimmed_mean_10pct == 0.0  # floor(1) cut per tail leaves 8 zeros

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            ttm_stats([])

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.floats(0, 1e4, allow_nan=False), min_size=1, max_size=50),
        st.floats(0.1, 10.0),
    )
    def test_permutation_invariant_and_scale_equivariant(self, values, scale):
        shuffled = list(values)
        random.Random(0).shuffle(shuffled)
        base = ttm_stats(values)
        assert ttm_stats(shuffled) == base
        scaled = ttm_stats([scale * v for v in values])
        assert scaled.median == pytest.approx(scale * base.median, rel=1e-9)
        assert scaled.trimmed_mean_10pct == pytest.approx(scale * base.trimmed_mean_10pct, rel=1e-9)


class TestBreakdown:
    def test_all_pipeline_one(self):
        rows = pipeline_breakdown([[1] * 10])
        assert [(r.resolved, r.cumulative_pct) for r in rows] == [
            (10, 100.0),
            (10, 100.0),
            (10, 100.0),
        ]

    def test_four_three_one_of_ten(self):
        run = [1] * 4 + [2] * 3 + [3] * 1 + [None] * 2
        rows = pipeline_breakdown([run])
        assert [round(r.cumulative_pct, 1) for r in rows] == [40.0, 70.0, 80.0]

    def test_fractional_average_over_runs(self):
        rows = pipeline_breakdown([[1, 2, None], [1, 1, None]])
        assert rows[0].resolved == pytest.approx(1.5)
        assert rows[1].resolved == pytest.approx(2.0)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.sampled_from([1, 2, 3, None]), min_size=1, max_size=40))
    def test_rows_non_decreasing_and_bounded(self, run):
        rows = pipeline_breakdown([run])
        resolved = [r.resolved for r in rows]
        assert resolved == sorted(resolved)
        assert rows[-1].resolved <= len(run)
        pcts = [r.cumulative_pct for r in rows]
        assert pcts == sorted(pcts) and pcts[-1] <= 100.0

    def test_empty(self):
        with pytest.raises(EmptyInput):
            pipeline_breakdown([])


class TestFidelity:
    def test_agreement_fraction(self):
        assert label_fidelity(["a", "b", "c", "d"], ["a", "b", "x", "d"]) == 0.75

    def test_misaligned_rejected(self):
        with pytest.raises(EmptyInput):
            label_fidelity(["a"], ["a", "b"])


class TestAblation:
    def _experiment(self, world, record_subset):
        taxonomy_full, registry, records, store, kb = world
        chosen = [r for r in records if str(r.root_cause) in record_subset]
        provider = HashingEmbedder()

        def run(taxonomy):
            preds = []
            for record in chosen:
                env = SimulatedEnvironment.from_scenario(scenario_for(record))
                ctx = OracleContext(taxonomy=taxonomy, registry=registry, env=env)
                gateway = Gateway(OracleBackend(ctx), clock=LogicalClock())
                engine = Engine(
                    taxonomy, store, registry, kb, gateway, env, provider, EngineConfig()
                )
                session = engine.diagnose(record, DecliningFeedback(max_rounds=0))
                outcome = session.outcome
                preds.append(
                    LabeledPrediction(
                        incident_id=record.id,
                        truth=record.root_cause,
                        predicted=outcome.root_causes[0] if outcome.root_causes else None,
                        resolving_pipeline=outcome.resolving_pipeline,
                    )
                )
            return preds

        return run

    def test_recoverable_sibling_keeps_category_accuracy(self, world):
        taxonomy, _, _, _, _ = world
        label = TaxonomyPath.parse("GPU.MEMORY.infoROM_Corruption")
        experiment = self._experiment(world, {str(label)})
        result = ablate_unseen(taxonomy, [label], experiment)[str(label)]
        assert result.before_accuracy == 1.0
        assert result.after_predictions_of_label == 0
        assert result.after_accuracy > 0.0

    def test_sole_label_drops_to_zero(self, world):
        taxonomy, _, _, _, _ = world
        label = TaxonomyPath.parse("System Software.CUDA.Host_VM_Version_Mismatch")
        experiment = self._experiment(world, {str(label)})
        result = ablate_unseen(taxonomy, [label], experiment)[str(label)]
        assert result.before_accuracy == 1.0
        assert result.after_predictions_of_label == 0
        assert result.after_accuracy == 0.0

    def test_unknown_label_rejected(self, world):
        taxonomy, _, _, _, _ = world
        with pytest.raises(UnknownLabel):
            ablate_unseen(taxonomy, [TaxonomyPath.parse("GPU.X.Y")], lambda t: [])
