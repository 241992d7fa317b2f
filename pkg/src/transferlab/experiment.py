"""Treatment definitions and the grid runner.

A treatment names one cell of the transfer experiment: train a base network
from scratch, splice the first n layers of a trained base into a fresh
network (selffer = same side, transfer = other side, each frozen or
fine-tuned), freeze n random layers, or train a base on a reduced dataset.
The grid runner executes the full cross product with per-cell derived seeds,
appends rows to a results CSV as they finish, and skips rows that already
exist, so an interrupted grid resumes where it stopped.

Result rows use the derived cell seed in the ``seed`` column: it is the
exact value fed to both the initializer and the training loop, so a row plus
the plan regenerates its accuracy bit for bit. Reduced-dataset rows encode
the per-class cap in the treatment label (``reduced_base@25``) because the
row schema has no cap column.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import datasplit as ds
from . import rng as rngmod
from .errors import DependencyError, InputError, ShapeError
from .nncore import (Conv, Dropout, FullyConnected, Lrn, MaxPool, ModelSpec,
                     Relu, SoftmaxXent)
from .optim import LrSchedule, TrainConfig, model_accuracy, train
from .surgery import (Checkpoint, init_random, randomize_first_n, transplant)

LAYERED_KINDS = ("selffer", "transfer", "random_first_n")
KINDS = ("base",) + LAYERED_KINDS + ("reduced_base",)


def desk_spec(num_classes: int = 10, image_size: int = 12) -> ModelSpec:
    """The five-weight-layer desk architecture.

    The first conv stage is deliberately narrow (5 channels at 5x5): a small
    filter bank cannot span every oriented pattern in the data, so what it
    learns leans toward the training side's classes. That keeps even the
    first layer measurably side-specific, which is what the frozen-transfer
    treatments probe.
    """
    return ModelSpec((1, image_size, image_size), (
        Conv(5, 5, 1, 2), Relu(), MaxPool(2, 2), Lrn(),
        Conv(16, 3, 1, 1), Relu(), MaxPool(2, 2), Lrn(),
        Conv(16, 3, 1, 1), Relu(),
        FullyConnected(64), Relu(), Dropout(0.5),
        FullyConnected(num_classes), SoftmaxXent(),
    ))


# ---------------------------------------------------------------------------
# treatments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Treatment:
    """One experimental condition.

    kind    one of base, selffer, transfer, random_first_n, reduced_base
    side    the side whose data the network trains toward
    n       splice depth for the layered kinds; 0 otherwise
    finetune  whether copied layers keep learning (selffer/transfer only)
    cap     examples-per-class ceiling (reduced_base only)
    rep     repetition index; folded into the derived cell seed
    """
    kind: str
    side: str
    n: int = 0
    finetune: bool = False
    cap: Optional[int] = None
    rep: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown treatment kind {self.kind!r}")
        if self.side not in ds.SIDES:
            raise InputError(f"treatment side must be one of {ds.SIDES}, got {self.side!r}")
        if self.kind in LAYERED_KINDS:
            if self.n < 1:
                raise InputError(
                    f"{self.kind} needs a splice depth n >= 1, got {self.n}; "
                    "n = 0 is just a base network")
        elif self.n != 0:
            raise InputError(f"{self.kind} takes no splice depth, got n={self.n}")
        if self.finetune and self.kind not in ("selffer", "transfer"):
            raise InputError(f"finetune applies only to selffer/transfer, not {self.kind}")
        if self.kind == "reduced_base":
            if self.cap is None or self.cap < 1:
                raise InputError(f"reduced_base needs a positive cap, got {self.cap}")
        elif self.cap is not None:
            raise InputError(f"{self.kind} takes no cap")
        if self.rep < 0:
            raise InputError(f"repetition index must be >= 0, got {self.rep}")

    @property
    def label(self) -> str:
        if self.kind == "reduced_base":
            return f"reduced_base@{self.cap}"
        return self.kind

    @property
    def donor_side(self) -> Optional[str]:
        if self.kind == "selffer":
            return self.side
        if self.kind == "transfer":
            return other_side(self.side)
        return None

    @property
    def direction(self) -> str:
        """Donor side then target side for spliced kinds, else the side."""
        donor = self.donor_side
        return f"{donor}{self.side}" if donor else self.side


def other_side(side: str) -> str:
    return "A" if side == "B" else "B"


@dataclass(frozen=True)
class TreatmentResult:
    treatment: str
    n: int
    direction: str
    finetune: bool
    seed: int
    top1_accuracy: float
    iterations: int
    base_ckpt_hash: str
    config_hash: str

    def __post_init__(self):
        if not 0.0 <= self.top1_accuracy <= 1.0:
            raise InputError(f"accuracy must lie in [0,1], got {self.top1_accuracy}")

    @property
    def key(self) -> tuple:
        return (self.treatment, self.n, self.direction, self.finetune,
                self.seed, self.config_hash)


def aggregate_directions(rows: list[TreatmentResult]) -> list[TreatmentResult]:
    """Relabel statistically equivalent directions under one canonical name.

    Both transfer directions splice features trained on one random class
    half into a network trained toward the other half, so AB and BA rows
    describe the same experiment; likewise AA and BB. Rows are relabeled,
    never dropped.
    """
    canon = {"BA": "AB", "AA": "BB"}
    return [replace(r, direction=canon.get(r.direction, r.direction)) for r in rows]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(model_or_ckpt, dataset: ds.LabeledDataset) -> float:
    """Top-1 accuracy on a validation-role dataset; ties go to the lowest class."""
    model = model_or_ckpt.to_model() if isinstance(model_or_ckpt, Checkpoint) else model_or_ckpt
    if dataset.role != "validation":
        raise InputError(f"evaluation needs a validation-role dataset, got {dataset.role!r}")
    if dataset.num_classes != model.spec.num_classes:
        raise ShapeError(
            f"dataset has {dataset.num_classes} classes but the model head "
            f"has {model.spec.num_classes}")
    return model_accuracy(model, dataset.images, dataset.labels)


# ---------------------------------------------------------------------------
# grid plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridPlan:
    """Declarative description of a full grid. Serializes to key=value text."""
    num_classes: int = 20
    per_class: int = 100
    image_size: int = 12
    val_per_class: int = 50
    noise: float = 1.0
    jitter: float = 0.10
    dataset_seed: int = 0
    split_seeds: tuple[int, ...] = (0,)
    target_side: str = "B"
    n_values: tuple[int, ...] = (1, 2, 3, 4)
    treatments: tuple[str, ...] = ("selffer", "selffer+", "transfer", "transfer+",
                                   "random_first_n", "reduced_base")
    caps: tuple[int, ...] = (5, 10, 25, 50, 100)
    reps: int = 4
    iterations: int = 3000
    batch_size: int = 32
    base_rate: float = 0.01
    drop_factor: float = 10.0
    drop_every: int = 2000
    momentum: float = 0.9
    weight_decay: float = 0.0005
    init_std: float = 0.1
    init_bias: float = 0.1
    random_gain: float = 0.35

    def __post_init__(self):
        if self.num_classes < 4 or self.num_classes % 2:
            raise InputError(
                f"the grid needs an even class count >= 4, got {self.num_classes}")
        if self.target_side not in ds.SIDES:
            raise InputError(f"target side must be one of {ds.SIDES}")
        if not self.split_seeds:
            raise InputError("at least one split seed is required")
        if self.reps < 1:
            raise InputError(f"repetitions must be >= 1, got {self.reps}")
        bad = [t for t in self.treatments if t not in PLAN_TREATMENTS]
        if bad:
            raise InputError(f"unknown treatments {bad}; valid: {sorted(PLAN_TREATMENTS)}")
        for n in self.n_values:
            if n < 1:
                raise InputError(f"splice depth n must be >= 1, got {n}")
        if "reduced_base" in self.treatments and not self.caps:
            raise InputError("reduced_base is planned but no caps are given")

    def model_spec(self) -> ModelSpec:
        return desk_spec(self.num_classes // 2, self.image_size)

    def train_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, momentum=self.momentum,
            weight_decay=self.weight_decay, total_iterations=self.iterations,
            schedule=LrSchedule(self.base_rate, self.drop_factor, self.drop_every),
            seed=seed)


PLAN_TREATMENTS = ("selffer", "selffer+", "transfer", "transfer+",
                   "random_first_n", "reduced_base")

_PLAN_LISTS = {"split_seeds": int, "n_values": int, "treatments": str, "caps": int}


def desk_plan() -> GridPlan:
    return GridPlan()


def format_plan(plan: GridPlan) -> str:
    lines = ["# transferlab grid plan"]
    for name in plan.__dataclass_fields__:
        value = getattr(plan, name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def parse_plan(text: str) -> GridPlan:
    fields = GridPlan.__dataclass_fields__
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputError(f"plan line {lineno}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in fields:
            raise InputError(f"plan line {lineno}: unknown key {key!r}")
        if key in _PLAN_LISTS:
            elem = _PLAN_LISTS[key]
            overrides[key] = tuple(elem(v.strip()) for v in value.split(",") if v.strip())
        else:
            kind = fields[key].type
            if kind == "int":
                overrides[key] = int(value)
            elif kind == "float":
                overrides[key] = float(value)
            else:
                overrides[key] = value
    return GridPlan(**overrides)


def read_plan(path) -> GridPlan:
    return parse_plan(Path(path).read_text(encoding="utf-8"))


def write_plan(path, plan: GridPlan) -> None:
    Path(path).write_text(format_plan(plan), encoding="utf-8")


def plan_cells(plan: GridPlan, split_seed: int) -> list[Treatment]:
    """Every cell of one split, bases first; the grid executes this order."""
    cells = [Treatment("base", side, rep=rep)
             for side in ds.SIDES for rep in range(plan.reps)]
    target = plan.target_side
    for token in plan.treatments:
        if token == "reduced_base":
            cells.extend(Treatment("reduced_base", target, cap=cap) for cap in plan.caps)
        elif token == "random_first_n":
            cells.extend(Treatment("random_first_n", target, n=n, rep=rep)
                         for n in plan.n_values for rep in range(plan.reps))
        else:
            kind = token.rstrip("+")
            plus = token.endswith("+")
            cells.extend(Treatment(kind, target, n=n, finetune=plus, rep=rep)
                         for n in plan.n_values for rep in range(plan.reps))
    return cells


def count_cells(plan: GridPlan) -> int:
    return sum(len(plan_cells(plan, s)) for s in plan.split_seeds)


# ---------------------------------------------------------------------------
# running cells
# ---------------------------------------------------------------------------

@dataclass
class GridContext:
    """Everything one split's cells need: data, donors, and knobs."""
    spec: ModelSpec
    sides: dict[str, tuple[ds.LabeledDataset, ds.LabeledDataset]]
    config: TrainConfig
    init_std: float
    init_bias: float
    random_gain: float
    split_seed: int
    bases: dict[str, Checkpoint] = field(default_factory=dict)


def build_context(plan: GridPlan, split_seed: int) -> GridContext:
    spec = plan.model_spec()
    L = spec.num_weight_layers
    for n in plan.n_values:
        if not 1 <= n <= L - 1:
            raise InputError(
                f"splice depth n={n} outside 1..{L - 1}; splicing every layer "
                "leaves nothing to train")
    train_all, val_all = ds.toy_dataset(
        num_classes=plan.num_classes, per_class=plan.per_class,
        image_size=plan.image_size, seed=plan.dataset_seed,
        val_per_class=plan.val_per_class, noise=plan.noise, jitter=plan.jitter)
    split = ds.split_random(train_all.classes, seed=split_seed)
    sides = {side: (ds.restrict(train_all, split, side),
                    ds.restrict(val_all, split, side))
             for side in ds.SIDES}
    return GridContext(
        spec=spec, sides=sides, config=plan.train_config(),
        init_std=plan.init_std, init_bias=plan.init_bias,
        random_gain=plan.random_gain, split_seed=split_seed)


def cell_seed(ctx: GridContext, t: Treatment) -> int:
    return rngmod.derive_seed("cell", ctx.split_seed, t.kind, t.side, t.n,
                              int(t.finetune), t.cap or 0, t.rep)


def checkpoint_hash(ckpt: Checkpoint) -> str:
    h = hashlib.sha256()
    h.update(ckpt.fingerprint().encode())
    p = ckpt.provenance
    h.update(f"{p.dataset_id}|{p.seed}|{p.iterations}".encode())
    for layer in ckpt.layers:
        h.update(np.ascontiguousarray(layer.weights).tobytes())
        h.update(np.ascontiguousarray(layer.bias).tobytes())
    return h.hexdigest()[:12]


def _config_hash(ctx: GridContext, t: Treatment, train_ds: ds.LabeledDataset) -> str:
    c = ctx.config
    parts = [
        ctx.spec.describe(), train_ds.dataset_id, ",".join(train_ds.classes),
        f"split={ctx.split_seed}",
        f"batch={c.batch_size} momentum={c.momentum} decay={c.weight_decay}",
        f"iters={c.total_iterations} lr={c.schedule.base_rate}"
        f"/{c.schedule.drop_factor}/{c.schedule.drop_every}",
        f"std={ctx.init_std} bias={ctx.init_bias} gain={ctx.random_gain}",
        f"cap={t.cap}",
    ]
    return hashlib.sha256("|".join(parts).encode()).hexdigest()[:12]


def run_treatment(t: Treatment, ctx: GridContext) -> tuple[TreatmentResult, Checkpoint]:
    """Build the model for one cell, train it, and evaluate it.

    Base cells return their checkpoint so the grid can register donors; the
    other kinds return theirs too, but nothing downstream depends on it.
    """
    train_ds, val_ds = ctx.sides[t.side]
    seed = cell_seed(ctx, t)
    std, bias = ctx.init_std, ctx.init_bias
    donor = None
    # the hash always covers the side's full training set; a reduced cell is
    # identified by its cap, which is hashed alongside
    config_hash = _config_hash(ctx, t, train_ds)

    if t.kind == "base":
        model = init_random(ctx.spec, seed, std=std, bias_value=bias)
    elif t.kind == "reduced_base":
        model = init_random(ctx.spec, seed, std=std, bias_value=bias)
        train_ds = ds.reduce_per_class(train_ds, t.cap, seed=seed)
    elif t.kind == "random_first_n":
        model = randomize_first_n(ctx.spec, t.n, seed, std=std, bias_value=bias,
                                  random_gain=ctx.random_gain)
    else:
        donor = ctx.bases.get(t.donor_side)
        if donor is None:
            raise DependencyError(
                f"{t.label} n={t.n} toward side {t.side} needs a trained "
                f"base for side {t.donor_side}, and none is registered")
        mode = "finetune" if t.finetune else "frozen"
        model = transplant(donor, ctx.spec, t.n, mode, seed, std=std, bias_value=bias)

    config = replace(ctx.config, seed=seed)
    ckpt, _ = train(model, train_ds, config)
    accuracy = evaluate(ckpt.to_model(), val_ds)
    result = TreatmentResult(
        treatment=t.label, n=t.n, direction=t.direction, finetune=t.finetune,
        seed=seed, top1_accuracy=accuracy, iterations=config.total_iterations,
        base_ckpt_hash=checkpoint_hash(donor) if donor else "-",
        config_hash=config_hash)
    return result, ckpt


# ---------------------------------------------------------------------------
# results store
# ---------------------------------------------------------------------------

RESULTS_HEADER = ("treatment,n,direction,finetune,seed,top1_accuracy,"
                  "iterations,base_ckpt_hash,config_hash")


def format_result(r: TreatmentResult) -> str:
    return (f"{r.treatment},{r.n},{r.direction},{int(r.finetune)},{r.seed},"
            f"{r.top1_accuracy!r},{r.iterations},{r.base_ckpt_hash},{r.config_hash}")


def parse_result(line: str) -> TreatmentResult:
    parts = line.rstrip("\n").split(",")
    if len(parts) != 9:
        raise InputError(f"bad results row (need 9 fields): {line!r}")
    return TreatmentResult(
        treatment=parts[0], n=int(parts[1]), direction=parts[2],
        finetune=bool(int(parts[3])), seed=int(parts[4]),
        top1_accuracy=float(parts[5]), iterations=int(parts[6]),
        base_ckpt_hash=parts[7], config_hash=parts[8])


def read_results(path) -> list[TreatmentResult]:
    path = Path(path)
    if not path.exists():
        return []
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip() or line == RESULTS_HEADER:
            continue
        rows.append(parse_result(line))
    return rows


def append_result(path, r: TreatmentResult) -> None:
    path = Path(path)
    header_needed = not path.exists() or path.stat().st_size == 0
    with open(path, "a", encoding="utf-8") as fh:
        if header_needed:
            fh.write(RESULTS_HEADER + "\n")
        fh.write(format_result(r) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


# ---------------------------------------------------------------------------
# the grid
# ---------------------------------------------------------------------------

@dataclass
class GridSummary:
    results: list[TreatmentResult]
    executed: int
    skipped: int
    failures: list[tuple[str, str, str]]  # (cell description, category, message)


def _describe_cell(t: Treatment, split_seed: int) -> str:
    bits = [f"split{split_seed}", t.label, f"dir={t.direction}"]
    if t.n:
        bits.append(f"n={t.n}")
    if t.finetune:
        bits.append("finetune")
    bits.append(f"rep={t.rep}")
    return " ".join(bits)


def run_grid(plan: GridPlan, out_dir, workers: int = 1,
             progress=None) -> GridSummary:
    """Execute every planned cell, appending to ``out_dir``/results.csv.

    Bases run first (the rep-0 base of each side is the donor for that
    side's spliced cells), then the dependent cells, optionally across a
    process pool. Cells whose rows already exist are skipped, so rerunning a
    finished grid trains nothing. A failing cell is recorded and the grid
    moves on.
    """
    from concurrent.futures import ProcessPoolExecutor

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_plan(out_dir / "plan.resolved", plan)
    results_file = out_dir / "results.csv"

    done = {r.key for r in read_results(results_file)}
    results: list[TreatmentResult] = []
    failures: list[tuple[str, str, str]] = []
    executed = skipped = 0

    def note(msg):
        if progress:
            progress(msg)

    for split_seed in plan.split_seeds:
        ctx = build_context(plan, split_seed)
        cells = plan_cells(plan, split_seed)
        bases = [t for t in cells if t.kind == "base"]
        dependents = [t for t in cells if t.kind != "base"]

        todo = []
        for t in dependents:
            if _result_key_for(ctx, t) in done:
                skipped += 1
                note(f"skip {_describe_cell(t, split_seed)}")
            else:
                todo.append(t)
        donor_sides = {t.donor_side for t in todo if t.donor_side}

        # checkpoints are not stored, so a resumed grid retrains the rep-0
        # base of any side that still has spliced cells pending; its recorded
        # row is left alone
        for t in bases:
            recorded = _result_key_for(ctx, t) in done
            is_donor = t.rep == 0 and t.side in donor_sides
            if recorded and not is_donor:
                skipped += 1
                note(f"skip {_describe_cell(t, split_seed)}")
                continue
            result, ckpt = run_treatment(t, ctx)
            if t.rep == 0:
                ctx.bases[t.side] = ckpt
            if recorded:
                note(f"retrained donor {_describe_cell(t, split_seed)}")
                continue
            append_result(results_file, result)
            done.add(result.key)
            results.append(result)
            executed += 1
            note(f"ran {_describe_cell(t, split_seed)} acc={result.top1_accuracy:.3f}")

        if workers > 1 and todo:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [(t, pool.submit(_run_cell, ctx, t)) for t in todo]
                for t, future in futures:
                    executed += _collect(future.result, t, ctx, split_seed,
                                         results_file, done, results, failures, note)
        else:
            for t in todo:
                executed += _collect(lambda t=t: _run_cell(ctx, t), t, ctx,
                                     split_seed, results_file, done, results,
                                     failures, note)

    all_rows = read_results(results_file)
    return GridSummary(results=all_rows, executed=executed,
                       skipped=skipped, failures=failures)


def _run_cell(ctx: GridContext, t: Treatment) -> TreatmentResult:
    result, _ = run_treatment(t, ctx)
    return result


def _result_key_for(ctx: GridContext, t: Treatment) -> tuple:
    return (t.label, t.n, t.direction, t.finetune, cell_seed(ctx, t),
            _config_hash(ctx, t, ctx.sides[t.side][0]))


def _collect(get_result, t, ctx, split_seed, results_file, done, results,
             failures, note) -> int:
    from .errors import TransferLabError
    try:
        result = get_result()
    except TransferLabError as err:
        failures.append((_describe_cell(t, split_seed), err.category, str(err)))
        note(f"FAILED {_describe_cell(t, split_seed)}: {err}")
        return 0
    append_result(results_file, result)
    done.add(result.key)
    results.append(result)
    note(f"ran {_describe_cell(t, split_seed)} acc={result.top1_accuracy:.3f}")
    return 1


def rerun_cell(plan: GridPlan, row: TreatmentResult) -> TreatmentResult:
    """Regenerate one recorded cell from its provenance.

    Rebuilds the split context, retrains the donor base if the cell needs
    one, and reruns the cell. The fresh accuracy must match the recorded one
    bit for bit; a donor hash mismatch means the plan no longer describes
    the recorded grid, which is reported rather than papered over.
    """
    for split_seed in plan.split_seeds:
        ctx = build_context(plan, split_seed)
        for t in plan_cells(plan, split_seed):
            if _result_key_for(ctx, t) != row.key:
                continue
            if t.donor_side is not None:
                donor_cell = Treatment("base", t.donor_side, rep=0)
                _, donor_ckpt = run_treatment(donor_cell, ctx)
                ctx.bases[t.donor_side] = donor_ckpt
                fresh_hash = checkpoint_hash(donor_ckpt)
                if fresh_hash != row.base_ckpt_hash:
                    raise DependencyError(
                        f"regenerated donor hash {fresh_hash} does not match "
                        f"the recorded {row.base_ckpt_hash}")
            result, _ = run_treatment(t, ctx)
            return result
    raise DependencyError("no planned cell matches the given result row")
