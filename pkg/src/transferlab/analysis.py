"""Turning result tables into transferability summaries.

Everything here is a pure function over lists of TreatmentResult rows: error
rates, mean boosts of fine-tuned transfer over its controls, base-normalized
curves, and the rise/slope diagnostics for the reduced-dataset sweep. Boosts
and normalized deltas are reported in accuracy percentage points (a boost of
1.6 means 1.6 points of top-1 accuracy), never relative percent.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from statistics import mean

from .errors import CoverageError, InputError
from .experiment import TreatmentResult

SPLICED = ("selffer", "transfer")


def series_label(row: TreatmentResult) -> str:
    """Stable plot-series name: spliced kinds get a '+' when fine-tuned."""
    if row.treatment in SPLICED:
        return row.treatment + ("+" if row.finetune else "")
    return row.treatment


def target_side(row: TreatmentResult) -> str:
    return row.direction[-1]


def error_from_accuracy(acc: float) -> float:
    """Top-1 error in percent."""
    if not 0.0 <= acc <= 1.0:
        raise InputError(f"accuracy must lie in [0,1], got {acc}")
    return (1.0 - acc) * 100.0


def base_mean(rows: list[TreatmentResult], side: str) -> float:
    values = [r.top1_accuracy for r in rows
              if r.treatment == "base" and r.direction == side]
    if not values:
        raise CoverageError(f"no base rows for side {side}",
                            missing=[f"base side={side}"])
    return mean(values)


# ---------------------------------------------------------------------------
# Table-style boosts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoostSummary:
    layer_range: tuple[int, int]
    baseline: str  # "base" or "selffer"
    mean_boost: float  # percentage points
    cells: int


def _infer_target(rows: list[TreatmentResult], label: str) -> str:
    sides = {target_side(r) for r in rows}
    if len(sides) != 1:
        raise InputError(
            f"{label} rows target more than one side ({sorted(sides)}); "
            "aggregate directions before summarizing")
    return sides.pop()


def mean_boost(rows: list[TreatmentResult], layer_range: tuple[int, int],
               baseline: str = "base") -> BoostSummary:
    """Mean advantage of fine-tuned transfer over a control, in points.

    The mean runs unweighted over every (n, seed) cell with n inside the
    inclusive layer range. The control is either the target side's base mean
    or, per n, the fine-tuned selffer mean.
    """
    lo, hi = layer_range
    if not 1 <= lo <= hi:
        raise InputError(f"layer range must satisfy 1 <= lo <= hi, got {layer_range}")
    if baseline not in ("base", "selffer"):
        raise InputError(f"baseline must be 'base' or 'selffer', got {baseline!r}")

    treat = [r for r in rows if series_label(r) == "transfer+" and lo <= r.n <= hi]
    missing = [f"transfer+ n={n}" for n in range(lo, hi + 1)
               if not any(r.n == n for r in treat)]
    if missing:
        raise CoverageError(f"table lacks cells: {', '.join(missing)}",
                            missing=missing)
    side = _infer_target(treat, "transfer+")

    if baseline == "base":
        floor = base_mean(rows, side)
        diffs = [r.top1_accuracy - floor for r in treat]
    else:
        controls = [r for r in rows if series_label(r) == "selffer+"
                    and target_side(r) == side]
        per_n = {}
        for n in range(lo, hi + 1):
            cell = [r.top1_accuracy for r in controls if r.n == n]
            if not cell:
                raise CoverageError(f"table lacks cells: selffer+ n={n}",
                                    missing=[f"selffer+ n={n}"])
            per_n[n] = mean(cell)
        diffs = [r.top1_accuracy - per_n[r.n] for r in treat]

    return BoostSummary(layer_range=(lo, hi), baseline=baseline,
                        mean_boost=mean(diffs) * 100.0, cells=len(diffs))


# ---------------------------------------------------------------------------
# base-normalized curves
# ---------------------------------------------------------------------------

def normalize_by_base(rows: list[TreatmentResult], side: str | None = None
                      ) -> dict[tuple[str, int], float]:
    """Per-(series, n) mean accuracy minus the base mean, in points.

    ``side`` defaults to the single side the spliced/randomized rows target.
    The base series itself appears as ("base", 0) at exactly zero.
    """
    layered = [r for r in rows if r.n >= 1]
    if side is None:
        if not layered:
            raise InputError("no layered rows to normalize and no side given")
        side = _infer_target(layered, "layered")
    floor = base_mean(rows, side)

    cells: dict[tuple[str, int], list[float]] = {}
    for r in layered:
        if target_side(r) != side:
            continue
        cells.setdefault((series_label(r), r.n), []).append(r.top1_accuracy)
    curve = {key: (mean(vals) - floor) * 100.0 for key, vals in cells.items()}
    if any(r.treatment == "base" and r.direction == side for r in rows):
        curve[("base", 0)] = 0.0
    return curve


# ---------------------------------------------------------------------------
# reduced-dataset diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    left: int
    right: int
    rise: float
    slope: float


@dataclass(frozen=True)
class OverfitSummary:
    """All adjacent segments, with the rightmost one called out: when its
    rise is near zero the model has stopped gaining from extra data, i.e.
    overfit to the smaller set would have been slight."""
    segments: tuple[Segment, ...]
    rightmost_rise: float
    rightmost_slope: float


def overfit_slope(points) -> OverfitSummary:
    pts = [(int(x), float(a)) for x, a in points]
    if len(pts) < 2:
        raise InputError(f"need at least 2 points, got {len(pts)}")
    for (x0, _), (x1, _) in zip(pts, pts[1:]):
        if x1 == x0:
            raise InputError(f"duplicate abscissa {x1}")
        if x1 < x0:
            raise InputError(
                f"points must be sorted by examples per class; {x1} follows {x0}")
    segments = tuple(
        Segment(x0, x1, a1 - a0, (a1 - a0) / (x1 - x0))
        for (x0, a0), (x1, a1) in zip(pts, pts[1:]))
    last = segments[-1]
    return OverfitSummary(segments=segments, rightmost_rise=last.rise,
                          rightmost_slope=last.slope)


def reduced_points(rows: list[TreatmentResult]) -> list[tuple[int, float]]:
    """(examples_per_class, mean accuracy) pairs from reduced_base rows."""
    groups: dict[int, list[float]] = {}
    for r in rows:
        name, _, cap = r.treatment.partition("@")
        if name != "reduced_base":
            continue
        if not cap.isdigit():
            raise InputError(f"malformed reduced treatment label {r.treatment!r}")
        groups.setdefault(int(cap), []).append(r.top1_accuracy)
    return [(cap, mean(groups[cap])) for cap in sorted(groups)]


def read_reduced_table(path) -> list[tuple[int, float]]:
    """Plain two-column CSV: examples_per_class,accuracy."""
    pts = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("examples_per_class"):
            continue
        x, _, a = line.partition(",")
        pts.append((int(x), float(a)))
    return pts


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(x, ".6g")


def _boost_ranges(ns: list[int]) -> list[tuple[int, int]]:
    lo, hi = min(ns), max(ns)
    ranges = [(lo, hi)]
    for start in (3, 5):
        if lo < start <= hi:
            ranges.append((start, hi))
    return ranges


def emit_report(rows: list[TreatmentResult], out_dir) -> list[Path]:
    """Write the four report CSVs; byte-identical for identical input rows.

    A boost range is only reported when the table fully covers it, so a grid
    with failed cells still yields a report for what did run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    fig2 = out_dir / "fig2_points.csv"
    ordered = sorted(rows, key=lambda r: (r.treatment, r.n, r.direction,
                                          r.finetune, r.seed))
    lines = ["treatment,n,direction,finetune,seed,top1_accuracy"]
    lines += [f"{r.treatment},{r.n},{r.direction},{int(r.finetune)},{r.seed},"
              f"{_fmt(r.top1_accuracy)}" for r in ordered]
    fig2.write_text("\n".join(lines) + "\n", encoding="utf-8")

    fig3 = out_dir / "fig3_normalized.csv"
    lines = ["series,n,delta_points"]
    if any(r.n >= 1 for r in rows):
        curve = normalize_by_base(rows)
        lines += [f"{series},{n},{_fmt(delta)}"
                  for (series, n), delta in sorted(curve.items())]
    fig3.write_text("\n".join(lines) + "\n", encoding="utf-8")

    table1 = out_dir / "table1_boosts.csv"
    lines = ["layers_lo,layers_hi,baseline,mean_boost_points"]
    transfer_ns = sorted({r.n for r in rows if series_label(r) == "transfer+"})
    if transfer_ns:
        for lo, hi in _boost_ranges(transfer_ns):
            for baseline in ("base", "selffer"):
                try:
                    summary = mean_boost(rows, (lo, hi), baseline)
                except CoverageError:
                    continue
                lines.append(f"{lo},{hi},{baseline},{_fmt(summary.mean_boost)}")
    table1.write_text("\n".join(lines) + "\n", encoding="utf-8")

    reduced = out_dir / "reduced_curve.csv"
    lines = ["examples_per_class,mean_accuracy"]
    lines += [f"{cap},{_fmt(acc)}" for cap, acc in reduced_points(rows)]
    reduced.write_text("\n".join(lines) + "\n", encoding="utf-8")

    return [fig2, fig3, table1, reduced]
