#!/usr/bin/env python3
"""Regenerate the large hierarchy fixture and its manual-assignment file.

The fixture is a 1000-class DAG whose annotated reachability counts match a
published reference hierarchy: twenty named interior nodes with counts from
90 up to the full 1000, a diamond at the dog node (reachable through both
canine and domestic_animal), five leaf classes shared between vertebrate and
domestic_animal, and 68 classes outside both the artifact and organism
subtrees. The manual file assigns those 68 leftovers 29/39, yielding the
final 551/449 man-made vs natural split.

Run from the repository root:  python3 scripts/make_fixtures.py
"""
from __future__ import annotations

import itertools
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"

# interior skeleton: node -> (parents, number of direct leaf classes)
SKELETON = {
    "entity": ((), 3),
    "physical_entity": (("entity",), 39),
    "object": (("physical_entity",), 9),
    "whole": (("object",), 17),
    "artifact": (("whole",), 74),
    "instrumentality": (("artifact",), 128),
    "device": (("instrumentality",), 130),
    "container": (("instrumentality",), 100),
    "covering": (("artifact",), 90),
    "living_thing": (("whole",), 0),
    "organism": (("living_thing",), 12),
    "animal": (("organism",), 61),
    "chordate": (("animal",), 0),
    "vertebrate": (("chordate",), 114),
    "domestic_animal": (("animal",), 0),
    "mammal": (("vertebrate",), 6),
    "placental": (("mammal",), 54),
    "carnivore": (("placental",), 28),
    "canine": (("carnivore",), 12),
    "dog": (("canine", "domestic_animal"), 118),
}
# five leaves under BOTH vertebrate and domestic_animal complete the
# domestic_animal count (118 dogs + 5 = 123) without adding to animal's
# union, since they are already vertebrates
SHARED_LEAVES = [("vertebrate", "domestic_animal")] * 5


def build_lines() -> tuple[list[str], list[str]]:
    lines = ["# 1000-class hierarchy fixture with published reachability counts",
             "# regenerate with scripts/make_fixtures.py"]
    for node, (parents, _) in SKELETON.items():
        lines.append(f"{node}\t{','.join(parents)}\t")
    counter = itertools.count()
    leftovers = []
    for node, (_, n_leaves) in SKELETON.items():
        for _ in range(n_leaves):
            cid = f"x{next(counter):04d}"
            lines.append(f"{cid}\t{node}\t{cid}")
            if node in ("entity", "physical_entity", "object", "whole"):
                leftovers.append(cid)
    for parents in SHARED_LEAVES:
        cid = f"x{next(counter):04d}"
        lines.append(f"{cid}\t{','.join(parents)}\t{cid}")
    return lines, leftovers


def main() -> None:
    lines, leftovers = build_lines()
    assert len(leftovers) == 68, len(leftovers)
    dag_path = FIXTURES / "manmade_natural.dag"
    dag_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    manual = ["# transferlab split manifest",
              "# method=manual",
              "class_id,side"]
    for i, cid in enumerate(sorted(leftovers)):
        manual.append(f"{cid},{'A' if i < 29 else 'B'}")
    manual_path = FIXTURES / "manmade_natural_manual.csv"
    manual_path.write_text("\n".join(manual) + "\n", encoding="utf-8")
    print(f"wrote {dag_path} ({len(lines)} lines) and {manual_path}")


if __name__ == "__main__":
    main()
