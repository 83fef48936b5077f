"""Constrained evolutionary architecture search.

Architectures are encoded as a stem conv, a list of stages
``(kind, channels)`` with strides fixed per stage position, and a
classifier head. Candidates are scored by :func:`performance_score` after a
short proxy training run and kept in the archive only if their validation
accuracy beats the baseline measured with the same proxy.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import archspec as A
from .data import ArrayDataset
from .train import TrainConfig, accuracy, train

logger = logging.getLogger(__name__)

STAGE_KINDS = ("residual", "pepe", "vac+conv")


class SearchError(RuntimeError):
    pass


def performance_score(accuracy: float, params: int, flops: int, kappa: float = 2.0,
                      beta: float = 0.5, gamma: float = 0.5) -> float:
    """``20 log10((100 acc)^kappa / ((params/1e6)^beta (flops/1e9)^gamma))``."""
    if not 0 < accuracy <= 1:
        raise ValueError(f"accuracy must lie in (0, 1], got {accuracy}")
    if params <= 0 or flops <= 0:
        raise ValueError("params and flops must be positive")
    return 20.0 * (kappa * math.log10(100.0 * accuracy) - beta * math.log10(params / 1e6)
                   - gamma * math.log10(flops / 1e9))


@dataclass
class SearchSpace:
    input_shape: tuple = (3, 32, 32)
    num_classes: int = 2
    min_stages: int = 1
    max_stages: int = 4
    kinds: tuple = STAGE_KINDS
    channels: tuple = (8, 16, 32, 64)
    strides: tuple = (2, 2, 2, 1)
    stem_channels: int = 16
    stem_stride: int = 1

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.kinds = tuple(self.kinds)
        self.channels = tuple(self.channels)
        self.strides = tuple(self.strides)
        if not 1 <= self.min_stages <= self.max_stages:
            raise ValueError("need 1 <= min_stages <= max_stages")
        if len(self.strides) < self.max_stages:
            raise ValueError("strides must list one stride per possible stage")
        unknown = set(self.kinds) - set(STAGE_KINDS)
        if unknown:
            raise ValueError(f"unknown stage kinds {sorted(unknown)}")

    @classmethod
    def from_json(cls, text: str) -> "SearchSpace":
        return cls(**json.loads(text))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def stages_to_spec(stages: Sequence[tuple], space: SearchSpace, name: str = "candidate") -> A.ArchSpec:
    c, h, w = space.input_shape
    lines = [f"input {c} {h} {w} name={name}",
             f"conv stem out={space.stem_channels} k=3 s={space.stem_stride}"]
    cin = space.stem_channels
    for i, (kind, ch) in enumerate(stages):
        s = space.strides[i]
        if kind == "residual":
            lines.append(f"residual st{i} mid={max(1, ch // 4)} out={ch} s={s}")
        elif kind == "pepe":
            lines.append(f"pepe st{i} p1={max(1, cin // 2)} e1={2 * ch} p2={max(1, ch // 2)} "
                         f"out={ch} s={s}")
        elif kind == "vac+conv":
            d = max(1, cin // 4)
            lines.append(f"vac st{i}_att down={d} embed={d} up={cin} pool=2")
            lines.append(f"conv st{i} out={ch} k=3 s={s}")
        else:
            raise ValueError(f"unknown stage kind {kind!r}")
        cin = ch
    lines.append(f"head {space.num_classes}")
    return A.parse_archspec("\n".join(lines), name=name)


def spec_to_stages(spec: A.ArchSpec) -> list:
    """Recover ``(kind, channels)`` stages from a spec built by :func:`stages_to_spec`."""
    stages = []
    for ls in spec.layers:
        if not re.fullmatch(r"st\d+", ls.name):
            continue
        if ls.kind in ("residual", "pepe"):
            stages.append((ls.kind, ls.params["out"]))
        elif ls.kind == "conv":
            stages.append(("vac+conv", ls.params["out"]))
    return stages


def is_valid(stages, space: SearchSpace) -> bool:
    if not space.min_stages <= len(stages) <= space.max_stages:
        return False
    if any(k not in space.kinds or c not in space.channels for k, c in stages):
        return False
    try:
        stages_to_spec(stages, space)
    except A.ArchSpecError:
        return False
    return True


def seed_prototype(space: Optional[SearchSpace] = None) -> A.ArchSpec:
    """Small residual design used to start the search."""
    space = space or SearchSpace()
    chans = sorted(space.channels)
    n = min(3, space.max_stages)
    picks = [chans[min(i + 1, len(chans) - 1)] for i in range(n)]
    stages = [("residual", c) for c in picks][:max(space.min_stages, n)]
    return stages_to_spec(stages, space, name="prototype")


def propose_mutation(stages: Sequence[tuple], space: SearchSpace, rng: np.random.Generator,
                     max_retries: int = 100) -> tuple[list, str]:
    """One random edit (kind swap, channel change, stage insert or delete) that stays valid."""
    stages = list(stages)
    for _ in range(max_retries):
        ops = ["kind", "channels"]
        if len(stages) < space.max_stages:
            ops.append("insert")
        if len(stages) > space.min_stages:
            ops.append("delete")
        op = ops[rng.integers(len(ops))]
        new = list(stages)
        if op == "kind":
            i = int(rng.integers(len(new)))
            choices = [k for k in space.kinds if k != new[i][0]]
            if not choices:
                continue
            k = choices[rng.integers(len(choices))]
            new[i] = (k, new[i][1])
            desc = f"stage {i}: kind {stages[i][0]} -> {k}"
        elif op == "channels":
            i = int(rng.integers(len(new)))
            choices = [c for c in space.channels if c != new[i][1]]
            if not choices:
                continue
            c = int(choices[rng.integers(len(choices))])
            new[i] = (new[i][0], c)
            desc = f"stage {i}: channels {stages[i][1]} -> {c}"
        elif op == "insert":
            i = int(rng.integers(len(new) + 1))
            st = (space.kinds[rng.integers(len(space.kinds))],
                  int(space.channels[rng.integers(len(space.channels))]))
            new.insert(i, st)
            desc = f"insert stage {i}: {st[0]} {st[1]}"
        else:
            i = int(rng.integers(len(new)))
            del new[i]
            desc = f"delete stage {i}: {stages[i][0]} {stages[i][1]}"
        if is_valid(new, space):
            return new, desc
    raise SearchError(f"no valid mutation found in {max_retries} attempts")


@dataclass
class Candidate:
    id: int
    spec: A.ArchSpec = field(repr=False)
    stages: list
    report: Optional[A.AnalyzerReport] = field(default=None, repr=False)
    val_accuracy: Optional[float] = None
    score: Optional[float] = None
    parent_id: Optional[int] = None
    mutation: str = "prototype"
    generation: int = 0

    @property
    def params(self) -> int:
        return self.report.total_params

    @property
    def flops(self) -> int:
        return self.report.total_flops


def mutate(candidate: Candidate, space: SearchSpace, seed) -> A.ArchSpec:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    stages, _ = propose_mutation(candidate.stages or spec_to_stages(candidate.spec), space, rng)
    return stages_to_spec(stages, space)


@dataclass
class Constraint:
    baseline_val_accuracy: float

    def __post_init__(self):
        if not 0 <= self.baseline_val_accuracy <= 1:
            raise ValueError("baseline accuracy must lie in [0, 1]")

    def satisfied(self, acc: float) -> bool:
        return acc > self.baseline_val_accuracy


@dataclass
class ProxyConfig:
    """Short fixed-step training used for baseline and candidates alike."""

    train: ArrayDataset
    val: ArrayDataset
    train_steps: int = 60
    batch_size: int = 32
    learning_rate: float = 0.005
    score_coeffs: dict = field(default_factory=lambda: {"kappa": 2.0, "beta": 0.5, "gamma": 0.5})


def proxy_accuracy(spec: A.ArchSpec, proxy: ProxyConfig, seed: int) -> float:
    net = A.build_network(spec, seed=seed)
    cfg = TrainConfig(learning_rate=proxy.learning_rate, epochs=10 ** 6, batch_size=proxy.batch_size,
                      seed=seed, rebalance=True, max_steps=proxy.train_steps)
    train(net, proxy.train, None, cfg)
    return accuracy(net, proxy.val)


@dataclass
class SearchResult:
    archive: list  # feasible candidates, best score first
    evaluated: list  # every evaluated candidate in id order
    generation_best: list  # best archived score after each generation (None while empty)
    baseline: Constraint


def _rank_key(c: Candidate, constraint: Constraint):
    return (not constraint.satisfied(c.val_accuracy), -c.score, c.id)


def search(space: SearchSpace, constraint: Constraint, budget: int, proxy: ProxyConfig,
           seed: int = 0, population: int = 4, parents: int = 3,
           prototype: Optional[A.ArchSpec] = None) -> SearchResult:
    """Evaluate the prototype, then repeatedly mutate the top ``parents`` survivors.

    Each generation produces up to ``population`` children; the run stops
    once ``budget`` candidates have been evaluated. Survivor ranking puts
    constraint-satisfying candidates first, then score, then id, so the
    incumbent best is never discarded.
    """
    if budget <= 0:
        return SearchResult([], [], [], constraint)
    rng = np.random.default_rng(seed)
    evaluated: list[Candidate] = []
    seen: set[str] = set()

    def evaluate(c: Candidate) -> Candidate:
        c.report = A.analyze(c.spec)
        c.val_accuracy = proxy_accuracy(c.spec, proxy, seed=int(seed) * 100_003 + c.id)
        c.score = performance_score(max(c.val_accuracy, 1e-6), c.params, c.flops,
                                    **proxy.score_coeffs)
        evaluated.append(c)
        seen.add(tuple(c.stages).__repr__())
        logger.info("candidate %d acc=%.4f score=%.2f %s", c.id, c.val_accuracy, c.score,
                    c.mutation)
        return c

    proto_spec = prototype or seed_prototype(space)
    evaluate(Candidate(0, proto_spec, spec_to_stages(proto_spec)))
    generation_best = [_best_feasible(evaluated, constraint)]
    gen = 0
    while len(evaluated) < budget:
        gen += 1
        pool = sorted(evaluated, key=lambda c: _rank_key(c, constraint))[:parents]
        n_children = min(population, budget - len(evaluated))
        for k in range(n_children):
            parent = pool[k % len(pool)]
            for _ in range(20):
                stages, desc = propose_mutation(parent.stages, space, rng)
                if repr(tuple(stages)) not in seen:
                    break
            cid = len(evaluated)
            spec = stages_to_spec(stages, space, name=f"cand{cid:03d}")
            evaluate(Candidate(cid, spec, stages, parent_id=parent.id, mutation=desc,
                               generation=gen))
        generation_best.append(_best_feasible(evaluated, constraint))
    archive = sorted((c for c in evaluated if constraint.satisfied(c.val_accuracy)),
                     key=lambda c: (-c.score, c.id))
    return SearchResult(archive, evaluated, generation_best, constraint)


def _best_feasible(cands, constraint) -> Optional[float]:
    scores = [c.score for c in cands if constraint.satisfied(c.val_accuracy)]
    return max(scores) if scores else None


# --------------------------------------------------------------------------
# reporting


def dominates(a: Candidate, b: Candidate) -> bool:
    """``a`` at least as good on accuracy, params and FLOPs and strictly better on one."""
    ge = a.val_accuracy >= b.val_accuracy and a.params <= b.params and a.flops <= b.flops
    gt = a.val_accuracy > b.val_accuracy or a.params < b.params or a.flops < b.flops
    return ge and gt


def pareto_front(cands: Sequence[Candidate]) -> list:
    return [c for c in cands if not any(dominates(o, c) for o in cands if o is not c)]


@dataclass
class TradeoffReport:
    rows: list  # dicts: id, accuracy, params, flops, score, best_* flags, pareto
    front_ids: list

    def render(self) -> str:
        out = ["id  | accuracy (%) | params (M) | FLOPs (G) | score  | pareto"]
        for r in self.rows:
            def mark(v, flag):
                return f"*{v}*" if r[flag] else v
            out.append(" | ".join([
                f"{r['id']:<3}",
                mark(f"{100 * r['accuracy']:.1f}", "best_accuracy"),
                mark(f"{r['params'] / 1e6:.4f}", "best_params"),
                mark(f"{r['flops'] / 1e9:.4f}", "best_flops"),
                mark(f"{r['score']:.2f}", "best_score"),
                "yes" if r["pareto"] else "",
            ]))
        return "\n".join(out)


def tradeoff_report(archive: Sequence[Candidate]) -> TradeoffReport:
    """Per-axis winners (accuracy, params, FLOPs, score) and the Pareto front."""
    if not archive:
        raise ValueError("empty archive")
    best_acc = max(c.val_accuracy for c in archive)
    best_p = min(c.params for c in archive)
    best_f = min(c.flops for c in archive)
    best_s = max(c.score for c in archive)
    front = {c.id for c in pareto_front(archive)}
    rows = [{"id": c.id, "accuracy": c.val_accuracy, "params": c.params, "flops": c.flops,
             "score": c.score, "best_accuracy": c.val_accuracy == best_acc,
             "best_params": c.params == best_p, "best_flops": c.flops == best_f,
             "best_score": c.score == best_s, "pareto": c.id in front} for c in archive]
    return TradeoffReport(rows, sorted(front))


INDEX_FIELDS = ["id", "score", "accuracy", "params", "flops", "parent_id", "generation", "mutation"]


def save_archive(result: SearchResult, out_dir) -> Path:
    """Write one ``.arch`` file per archived candidate plus ``index.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "index.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_FIELDS)
        for c in result.archive:
            (out_dir / f"cand{c.id:03d}.arch").write_text(A.serialize_archspec(c.spec),
                                                          encoding="utf-8")
            w.writerow([c.id, f"{c.score:.6f}", f"{c.val_accuracy:.6f}", c.params, c.flops,
                        "" if c.parent_id is None else c.parent_id, c.generation, c.mutation])
    return out_dir
