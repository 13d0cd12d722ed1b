from __future__ import annotations

from infradiag.builder import TwoPassBuilder, group_records_by_label, offline_build
from infradiag.gateway import Gateway
from infradiag.synthetic import (
    OracleBackend,
    OracleContext,
    synthetic_records,
    world_leaf_descriptions,
    world_truths,
)
from infradiag.taxonomy import MAIN_CATEGORIES
from infradiag.util import LogicalClock


def oracle_gateway(records, truth_edits: dict[str, str] | None = None) -> Gateway:
    truths = world_truths(records)
    truths.update(truth_edits or {})
    ctx = OracleContext(truth_by_id=truths, leaf_descriptions=world_leaf_descriptions())
    return Gateway(OracleBackend(ctx), clock=LogicalClock())


class TestTwoPassBuild:
    def test_builds_all_populated_leaves(self):
        records = synthetic_records()
        taxonomy, report = TwoPassBuilder(oracle_gateway(records)).build(records)
        assert [n.label for n in taxonomy.root.children] == list(MAIN_CATEGORIES)
        leaves = {str(p) for p in taxonomy.leaf_paths()}
        assert {str(r.root_cause) for r in records} <= leaves
        # every repeated label refined at least once
        assert report.refined
        assert not report.skipped

    def test_second_run_adds_nothing(self):
        records = synthetic_records()
        gateway = oracle_gateway(records)
        taxonomy, first = TwoPassBuilder(gateway).build(records)
        count = taxonomy.node_count()
        growth_first = taxonomy.label_growth()
        taxonomy, second = TwoPassBuilder(oracle_gateway(records)).build(records, taxonomy=taxonomy)
        assert second.added == []
        assert taxonomy.node_count() == count
        assert taxonomy.label_growth() == growth_first

    def test_growth_partitions_added_nodes(self):
        records = synthetic_records()
        taxonomy, _ = TwoPassBuilder(oracle_gateway(records)).build(records)
        growth = taxonomy.label_growth()
        assert sum(count for _, count in growth) == taxonomy.node_count() - len(MAIN_CATEGORIES)
        months = [month for month, _ in growth]
        assert months == sorted(months)

    def test_bad_main_category_skipped_with_reason(self):
        records = synthetic_records()[:10]
        gateway = oracle_gateway(records, truth_edits={records[0].id: "Mainframe.Sub.Leaf"})
        taxonomy, report = TwoPassBuilder(gateway).build(records)
        assert any(subject == records[0].id for subject, _ in report.skipped)
        assert taxonomy.lookup("Mainframe") is None

    def test_tsg_labels_merge(self):
        records = synthetic_records()
        tsg = [
            {
                "label": "GPU.HARDWARE.Overheating",
                "description": "thermal shutdown",
                "date": "2024-04-16T09:00:00Z",
            }
        ]
        taxonomy, report = TwoPassBuilder(oracle_gateway(records)).build(records, tsg_labels=tsg)
        node = taxonomy.lookup("GPU.HARDWARE.Overheating")
        assert node is not None and node.origin.value == "tsg"
        assert "GPU.HARDWARE.Overheating" in report.added


class TestOfflineBuild:
    def test_every_populated_leaf_gets_a_script(self):
        records = synthetic_records()
        taxonomy, registry, _, extraction = offline_build(records, oracle_gateway(records))
        populated = {str(r.root_cause) for r in records}
        for leaf in populated:
            node = taxonomy.lookup(leaf)
            assert node is not None
            assert node.verification, f"{leaf} has no bound script"
            assert all(registry.get(sid) is not None for sid in node.verification)
        assert any(d.status == "quarantined" for d in extraction.drafts)

    def test_grouping_skips_unlabeled(self):
        records = synthetic_records()
        from dataclasses import replace

        records[0] = replace(records[0], root_cause=None)
        groups = group_records_by_label(records)
        assert records[0].id not in [r.id for rs in groups.values() for r in rs]
