"""Run the full system and its ablations, then write one combined table.

Live mode runs every variant against the configured endpoints. Cassette mode
replays the full variant from the given cassette and derives each ablated
variant's cassette by dropping the responses the disabled modules would have
consumed, so the whole sweep runs offline. Replayed answers are the same
for every variant, so offline scores only differ in live runs; the offline
sweep exercises call accounting and the report pipeline.

    python scripts/run_ablations.py --config golden/toy_config.toml --dataset golden/toy_dataset.json
    MEMCYCLE_API_KEY=... python scripts/run_ablations.py --provider live --dataset conv26.json --out runs/
"""
from __future__ import annotations

import argparse
import logging
from dataclasses import replace
from pathlib import Path

from memcycle.cli import make_provider
from memcycle.config import build_config, load_config_file, with_ablations
from memcycle.evaluation import emit_report, ingest_dataset, render_markdown, run_experiment, variant_label
from memcycle.providers import EVOLUTION_ROLES, Cassette, CassetteProvider

VARIANTS = ((), ("C",), ("R",), ("E",), ("C", "R", "E"))


def ablated_cassette(full: Cassette, ablations: tuple[str, ...], probe_answers: int) -> Cassette:
    queues = {role: list(q) for role, q in full.completions.items()}
    dropped = set()
    if "C" in ablations:
        dropped.add("meta_construction")
    if "R" in ablations:
        dropped |= {"meta_answerability", "query_rewriter"}
    if "E" in ablations:
        dropped |= {r.value for r in EVOLUTION_ROLES}
        # probe verification happens before any question is answered
        for role in ("answerer", "judge"):
            queues[role] = queues.get(role, [])[probe_answers:]
    return replace(full, completions={r: q for r, q in queues.items() if r not in dropped})


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--dataset", required=True)
    parser.add_argument("--config")
    parser.add_argument("--provider", choices=["cassette", "live"])
    parser.add_argument("--cassette")
    parser.add_argument("--out", default="runs/ablations")
    args = parser.parse_args()
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    flags = {"provider.mode": args.provider or ("cassette" if args.cassette else None),
             "provider.cassette": args.cassette}
    base = build_config(load_config_file(args.config) if args.config else {}, flags)
    dataset = ingest_dataset(args.dataset)
    out = Path(args.out)

    full_cassette = Cassette.load(base.provider.cassette) if base.provider.mode == "cassette" else None
    probe_answers = 0
    rows = []
    for ablations in VARIANTS:
        config = with_ablations(base, ablations)
        if full_cassette is None:
            provider = make_provider(config)
        else:
            provider = CassetteProvider(ablated_cassette(full_cassette, ablations, probe_answers), seed=config.seed)
        report = run_experiment(dataset, config, provider)
        if not ablations:
            probe_answers = report.calls.get("answerer", 0) - len(dataset.qa)
        doc = report.to_dict()
        name = "full" if not ablations else "no_" + "".join(ablations)
        emit_report(report, out / f"{name}.json", out / "traces" / name)
        rows.append(render_markdown(doc, variant_label(doc)).splitlines()[2])
        print(f"{variant_label(doc):<16} overall {doc['aggregates']['overall']}")

    header = render_markdown(doc, "").splitlines()[:2]
    (out / "ablations.md").write_text("\n".join(header + rows) + "\n", encoding="utf-8")
    print(f"wrote {out / 'ablations.md'}")


if __name__ == "__main__":
    main()
