#!/usr/bin/env python3
"""Run the synthetic suite and print the overhead/statistics tables: per-incident
LLM invocations, token totals and API cost, verification time, monthly label
growth, per-category recurrence, description clustering, and TTM stats.

Usage: python scripts/overhead_report.py [--config fixtures/synthetic/experiment.json] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from infradiag.corpus import HashingEmbedder, IncidentStore, distinct_description_clusters
from infradiag.evalkit import ExperimentConfig, run_experiment, ttm_stats
from infradiag.gateway import PricingConfig, cost
from infradiag.taxonomy import MAIN_CATEGORIES, Taxonomy


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    root = Path(__file__).resolve().parent.parent
    parser.add_argument("--config", default=str(root / "fixtures" / "synthetic" / "experiment.json"))
    parser.add_argument("--json", help="also write the numbers as JSON")
    args = parser.parse_args()

    config = ExperimentConfig.from_file(args.config)
    result = run_experiment(config)
    n = len(result.predictions)

    avg_invocations = sum(p.llm_invocations for p in result.predictions) / n
    avg_in = sum(p.usage.input_tokens for p in result.predictions) / n
    avg_out = sum(p.usage.output_tokens for p in result.predictions) / n
    avg_verify = sum(p.verification_seconds for p in result.predictions) / n
    pricing = PricingConfig.from_file(config.pricing) if config.pricing else None
    per_incident_cost = cost({"chat-default": (avg_in, avg_out)}, pricing) if pricing else None

    print("== per-incident overhead ==")
    print(f"sessions: {n}   micro F1: {result.metric.micro_f1:.3f}")
    print(f"LLM invocations: {avg_invocations:.2f}")
    print(f"input tokens: {avg_in:.1f}   output tokens: {avg_out:.1f}")
    if per_incident_cost is not None:
        print(f"price (USD): ${per_incident_cost:.3f}")
    print(f"verification time (simulated seconds): {avg_verify:.1f}")

    print("\n== pipeline breakdown ==")
    for row in result.breakdown:
        print(f"{row.stage:<18} resolved {row.resolved:.1f}  cumulative {row.cumulative_pct:.1f}%")

    taxonomy = Taxonomy.load_file(config.taxonomy)
    print("\n== monthly label growth ==")
    growth = taxonomy.label_growth()
    for month, count in growth:
        print(f"{month}  {'#' * count} {count}")

    provider = HashingEmbedder()
    store = IncidentStore.load(config.corpus, config.vectors, provider)
    print("\n== recurrence rate per main category ==")
    recurrence = {}
    for category in MAIN_CATEGORIES:
        rate = store.recurrence_rate(category)
        recurrence[category] = rate
        print(f"{category:<28} {rate:.2f}")

    print("\n== distinct descriptions per 10 incidents (greedy clustering) ==")
    clusters = {}
    by_leaf: dict[str, list] = {}
    for record in store.records():
        if record.root_cause is not None:
            by_leaf.setdefault(str(record.root_cause), []).append(record)
    for leaf, records in sorted(by_leaf.items(), key=lambda kv: -len(kv[1]))[:4]:
        count = distinct_description_clusters(records, provider)
        clusters[leaf] = count
        print(f"{leaf:<52} {count} cluster(s) over {len(records)}")

    ttms = [r.ttm_hours for r in store.records() if r.ttm_hours is not None]
    stats = ttm_stats(ttms)
    print("\n== time to mitigate (hours) ==")
    print(f"median {stats.median:.2f}   10% trimmed mean {stats.trimmed_mean_10pct:.2f}")

    if args.json:
        doc = {
            "avg_llm_invocations": round(avg_invocations, 3),
            "avg_input_tokens": round(avg_in, 1),
            "avg_output_tokens": round(avg_out, 1),
            "price_usd": per_incident_cost,
            "avg_verification_seconds": round(avg_verify, 1),
            "micro_f1": result.metric.micro_f1,
            "breakdown": [row.to_json() for row in result.breakdown],
            "label_growth": growth,
            "recurrence": recurrence,
            "clusters": clusters,
            "ttm": {"median": stats.median, "trimmed_mean_10pct": stats.trimmed_mean_10pct},
        }
        Path(args.json).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


if __name__ == "__main__":
    sys.exit(main())
