"""Line-oriented architecture files, shape inference, network building and cost analysis.

File format::

    input <C> <H> <W> [name=<text>]
    <kind> <name> key=value ...
    head <classes>

Blank lines and ``#`` comments are ignored. Kinds and their keys are listed
in :data:`KINDS`; keys set to ``None`` there are required.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import layers as L
from .tensor import ShapeError, Tensor

REQUIRED = None
KINDS: dict[str, dict] = {
    "conv": {"out": REQUIRED, "k": 3, "s": 1, "p": "auto", "groups": 1, "bn": 1, "act": "relu"},
    "dwconv": {"k": 3, "s": 1, "p": "auto", "bn": 1, "act": "relu"},
    "pwconv": {"out": REQUIRED, "s": 1, "bn": 1, "act": "relu"},
    "residual": {"mid": REQUIRED, "out": REQUIRED, "s": 1, "stride_on": "3x3"},
    "pepe": {"p1": REQUIRED, "e1": REQUIRED, "p2": REQUIRED, "out": REQUIRED, "k": 3, "s": 1},
    "vac": {"down": REQUIRED, "embed": REQUIRED, "up": REQUIRED, "pool": 2},
    "pool": {"type": "max", "k": 2, "s": "auto", "p": 0, "ceil": 0},
}
_TEXT_KEYS = {"act": ("relu", "none"), "stride_on": ("3x3", "1x1"),
              "type": ("max", "avg", "gap")}
_POSITIVE = {"out", "mid", "p1", "e1", "p2", "down", "embed", "up", "k", "s", "groups", "pool"}
_FLAGS = {"bn", "ceil"}

FLOP_CONVENTION = "FLOPs = 2 x multiply-accumulates; conv and dense only"


class ArchSpecError(ValueError):
    """Parse or shape-inference failure; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: Optional[int] = None, layer: Optional[str] = None):
        self.line = line
        self.layer = layer
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


@dataclass
class LayerSpec:
    kind: str
    name: str
    params: dict
    line: Optional[int] = field(default=None, compare=False)


@dataclass
class ArchSpec:
    name: str
    input_shape: tuple
    layers: list
    num_classes: int

    def layer(self, name: str) -> LayerSpec:
        for ls in self.layers:
            if ls.name == name:
                return ls
        raise KeyError(name)


# --------------------------------------------------------------------------
# parsing


def _coerce(kind: str, key: str, raw: str, line: int):
    if key in _TEXT_KEYS:
        if raw not in _TEXT_KEYS[key]:
            raise ArchSpecError(f"{kind}: {key} must be one of {_TEXT_KEYS[key]}, got {raw!r}", line)
        return raw
    try:
        v = int(raw)
    except ValueError:
        raise ArchSpecError(f"{kind}: {key} must be an integer, got {raw!r}", line) from None
    if key in _POSITIVE and v < 1:
        raise ArchSpecError(f"{kind}: {key} must be positive, got {v}", line)
    if key in _FLAGS and v not in (0, 1):
        raise ArchSpecError(f"{kind}: {key} must be 0 or 1, got {v}", line)
    if v < 0:
        raise ArchSpecError(f"{kind}: {key} must be nonnegative, got {v}", line)
    return v


def _complete(kind: str, params: dict, line: int) -> dict:
    schema = KINDS[kind]
    for key in params:
        if key not in schema:
            raise ArchSpecError(f"{kind}: unknown key {key!r}", line)
    out = {}
    for key, default in schema.items():
        if key in params:
            out[key] = params[key]
        elif default is REQUIRED:
            raise ArchSpecError(f"{kind}: missing hyperparameter {key!r}", line)
        else:
            out[key] = default
    if out.get("p") == "auto":
        out["p"] = out["k"] // 2 if kind in ("conv", "dwconv") else 0
    if out.get("s") == "auto":
        out["s"] = out["k"]
    return out


def parse_archspec(text: str, name: Optional[str] = None) -> ArchSpec:
    """Parse architecture text into a validated :class:`ArchSpec`."""
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0].strip()
        if stripped:
            entries.append((lineno, stripped.split()))
    if not entries:
        raise ArchSpecError("empty architecture file")
    lineno, toks = entries[0]
    if toks[0] != "input":
        raise ArchSpecError("first line must be 'input <C> <H> <W>'", lineno)
    dims = [t for t in toks[1:] if "=" not in t]
    opts = dict(t.split("=", 1) for t in toks[1:] if "=" in t)
    if len(dims) != 3:
        raise ArchSpecError("input needs exactly three dimensions C H W", lineno)
    try:
        shape = tuple(int(d) for d in dims)
    except ValueError:
        raise ArchSpecError(f"input dimensions must be integers, got {dims}", lineno) from None
    if min(shape) < 1:
        raise ArchSpecError(f"input dimensions must be positive, got {shape}", lineno)
    spec_name = opts.pop("name", None) or name or "arch"
    if opts:
        raise ArchSpecError(f"input: unknown key(s) {sorted(opts)}", lineno)

    layers: list[LayerSpec] = []
    seen: set[str] = set()
    classes = None
    for i, (lineno, toks) in enumerate(entries[1:], start=1):
        kind = toks[0]
        if kind == "head":
            if i != len(entries) - 1:
                raise ArchSpecError("head must be the last line", lineno)
            if len(toks) != 2:
                raise ArchSpecError("head takes exactly one value: head <classes>", lineno)
            classes = _coerce("head", "out", toks[1], lineno)
            layers.append(LayerSpec("head", "head", {"classes": classes}, lineno))
            continue
        if kind not in KINDS:
            raise ArchSpecError(f"unknown layer kind {kind!r}", lineno)
        if len(toks) < 2 or "=" in toks[1]:
            raise ArchSpecError(f"{kind}: missing layer name", lineno)
        lname = toks[1]
        if lname in seen or lname == "head":
            raise ArchSpecError(f"duplicate layer name {lname!r}", lineno)
        seen.add(lname)
        params = {}
        for tok in toks[2:]:
            if "=" not in tok:
                raise ArchSpecError(f"{kind}: expected key=value, got {tok!r}", lineno)
            key, val = tok.split("=", 1)
            if key in params:
                raise ArchSpecError(f"{kind}: key {key!r} given twice", lineno)
            if key not in KINDS[kind]:
                raise ArchSpecError(f"{kind}: unknown key {key!r}", lineno)
            params[key] = _coerce(kind, key, val, lineno)
        layers.append(LayerSpec(kind, lname, _complete(kind, params, lineno), lineno))
    if classes is None:
        raise ArchSpecError("last line must be 'head <classes>'", entries[-1][0])
    if len(layers) < 1:
        raise ArchSpecError("no layers")
    spec = ArchSpec(spec_name, shape, layers, classes)
    infer_shapes(spec)
    return spec


def load_archspec(path) -> ArchSpec:
    path = Path(path)
    return parse_archspec(path.read_text(encoding="utf-8"), name=path.stem)


def serialize_archspec(spec: ArchSpec) -> str:
    c, h, w = spec.input_shape
    lines = [f"input {c} {h} {w} name={spec.name}"]
    for ls in spec.layers:
        if ls.kind == "head":
            lines.append(f"head {ls.params['classes']}")
        else:
            kv = " ".join(f"{k}={v}" for k, v in ls.params.items())
            lines.append(f"{ls.kind} {ls.name} {kv}".rstrip())
    return "\n".join(lines) + "\n"


def reference_resnet50_text() -> str:
    return resources.files("scanet.resources").joinpath("resnet50.arch").read_text(encoding="utf-8")


def reference_resnet50() -> ArchSpec:
    return parse_archspec(reference_resnet50_text(), name="resnet50")


# --------------------------------------------------------------------------
# layer construction and shape inference


def make_layer(ls: LayerSpec, in_ch: int) -> L.Layer:
    p = ls.params
    if ls.kind == "conv":
        if in_ch % p["groups"] or p["out"] % p["groups"]:
            raise ShapeError(f"groups={p['groups']} must divide {in_ch} input and "
                             f"{p['out']} output channels")
        return L.ConvUnit(in_ch, p["out"], p["k"], p["s"], p["p"], p["groups"], bool(p["bn"]),
                          p["act"], name=ls.name)
    if ls.kind == "dwconv":
        return L.ConvUnit(in_ch, in_ch, p["k"], p["s"], p["p"], in_ch, bool(p["bn"]), p["act"],
                          name=ls.name)
    if ls.kind == "pwconv":
        return L.ConvUnit(in_ch, p["out"], 1, p["s"], 0, 1, bool(p["bn"]), p["act"], name=ls.name)
    if ls.kind == "residual":
        return L.ResidualBlock(in_ch, p["mid"], p["out"], p["s"], p["stride_on"], name=ls.name)
    if ls.kind == "pepe":
        if not p["p1"] < in_ch:
            raise ShapeError(f"first projection p1={p['p1']} must be below input channels {in_ch}")
        return L.PEPEBlock(in_ch, p["p1"], p["e1"], p["p2"], p["out"], p["k"], p["s"], name=ls.name)
    if ls.kind == "vac":
        if p["up"] != in_ch:
            raise ShapeError(f"up-mixing channels {p['up']} must equal incoming channels {in_ch}")
        return L.VisualAttentionCondenser(in_ch, p["down"], p["embed"], p["up"], p["pool"],
                                          name=ls.name)
    if ls.kind == "pool":
        kind = "global_avg" if p["type"] == "gap" else p["type"]
        return L.PoolLayer(kind, p["k"], p["s"], p["p"], bool(p["ceil"]), name=ls.name)
    if ls.kind == "head":
        return L.ClassifierHead(in_ch, p["classes"], name="head")
    raise ShapeError(f"unknown kind {ls.kind}")


def _resolve(spec: ArchSpec, input_shape: Optional[tuple] = None):
    shape = tuple(input_shape or spec.input_shape)
    resolved = []
    for ls in spec.layers:
        try:
            layer = make_layer(ls, shape[0])
            out = layer.output_shape(shape)
        except (ShapeError, ValueError) as exc:
            raise ArchSpecError(f"layer {ls.name!r} ({ls.kind}): {exc}", ls.line, ls.name) from None
        resolved.append((ls, layer, shape, out))
        shape = out
    return resolved


def infer_shapes(spec: ArchSpec, input_shape: Optional[tuple] = None) -> list:
    """``[(layer name, output shape), ...]`` or :class:`ArchSpecError` at the first bad layer."""
    if not spec.layers or spec.layers[-1].kind != "head":
        raise ArchSpecError("architecture must end with a head")
    return [(ls.name, out) for ls, _, _, out in _resolve(spec, input_shape)]


class Network:
    """Ordered layers with initialized parameters."""

    def __init__(self, spec: ArchSpec, layers: list):
        self.spec = spec
        self.layers = layers

    def params(self) -> list:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def buffers(self) -> list:
        out = []
        for layer in self.layers:
            out.extend(layer.buffers())
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def forward(self, x, ctx: Optional[L.Context] = None) -> Tensor:
        ctx = ctx or L.Context()
        y = x if isinstance(x, Tensor) else Tensor(x)
        for layer in self.layers:
            y = layer.forward(y, ctx)
        return y

    __call__ = forward

    def predict_logits(self, images: np.ndarray, chunk: int = 64) -> np.ndarray:
        """Inference-mode logits for ``[N, C, H, W]`` images."""
        dtype = self.params()[0].data.dtype
        outs = [self.forward(Tensor(np.asarray(images[i:i + chunk], dtype=dtype))).data
                for i in range(0, len(images), chunk)]
        return np.concatenate(outs, axis=0)

    def state_arrays(self) -> list:
        return [(p.name, p.data) for p in self.params()]


def build_network(spec: ArchSpec, seed: int = 0, dtype=np.float32,
                  input_shape: Optional[tuple] = None) -> Network:
    """Instantiate ``spec`` with He-normal conv/dense weights, BN gamma=1/beta=0, VAC scale=1."""
    resolved = _resolve(spec, input_shape)
    rng = np.random.default_rng(seed)
    layers = [layer for _, layer, _, _ in resolved]
    for layer in layers:
        layer.init_params(rng, dtype)
    return Network(spec, layers)


# --------------------------------------------------------------------------
# analysis


@dataclass
class LayerReport:
    name: str
    kind: str
    params: int
    flops: int
    output_shape: tuple


@dataclass
class AnalyzerReport:
    name: str
    total_params: int
    total_flops: int
    per_layer: list
    conventions: str = FLOP_CONVENTION
    input_shape: tuple = ()

    @property
    def params_m(self) -> float:
        return self.total_params / 1e6

    @property
    def flops_g(self) -> float:
        return self.total_flops / 1e9

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        for row in d["per_layer"]:
            row["output_shape"] = list(row["output_shape"])
        return d

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def summary(self) -> str:
        return f"Params: {self.params_m:.2f}M, FLOPs: {self.flops_g:.2f}G"

    def render(self) -> str:
        lines = [f"{self.name} (input {'x'.join(map(str, self.input_shape))})",
                 f"{'layer':<16} {'kind':<9} {'params':>12} {'FLOPs':>16}  output"]
        for r in self.per_layer:
            shape = "x".join(map(str, r.output_shape))
            lines.append(f"{r.name:<16} {r.kind:<9} {r.params:>12,} {r.flops:>16,}  {shape}")
        lines.append(self.summary())
        lines.append(f"({self.conventions})")
        return "\n".join(lines)


ANALYZER_SCHEMA = {
    "type": "object",
    "required": ["name", "total_params", "total_flops", "per_layer", "conventions"],
    "properties": {
        "name": {"type": "string"},
        "total_params": {"type": "integer", "minimum": 0},
        "total_flops": {"type": "integer", "minimum": 0},
        "conventions": {"type": "string"},
        "input_shape": {"type": "array", "items": {"type": "integer"}},
        "per_layer": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "kind", "params", "flops", "output_shape"],
                "properties": {
                    "name": {"type": "string"},
                    "kind": {"type": "string"},
                    "params": {"type": "integer", "minimum": 0},
                    "flops": {"type": "integer", "minimum": 0},
                    "output_shape": {"type": "array", "items": {"type": "integer"}},
                },
            },
        },
    },
}


def analyze(spec: ArchSpec, input_shape: Optional[tuple] = None) -> AnalyzerReport:
    """Parameter and FLOP accounting; FLOPs are 2 x MACs of conv and dense layers."""
    rows = []
    for ls, layer, in_shape, out in _resolve(spec, input_shape):
        rows.append(LayerReport(ls.name, ls.kind, L.layer_param_count(layer),
                                2 * layer.macs(in_shape), tuple(out)))
    return AnalyzerReport(spec.name, sum(r.params for r in rows), sum(r.flops for r in rows),
                          rows, FLOP_CONVENTION, tuple(input_shape or spec.input_shape))


@dataclass
class ComparisonRow:
    name: str
    params_m: float
    flops_g: float
    accuracy: Optional[float] = None
    best: dict = field(default_factory=dict)
    param_ratio: float = 1.0
    flop_ratio: float = 1.0


@dataclass
class ComparisonTable:
    rows: list
    has_accuracy: bool

    def to_dict(self) -> dict:
        return {"has_accuracy": self.has_accuracy, "rows": [asdict(r) for r in self.rows]}

    def render(self) -> str:
        def cell(text, best):
            return f"**{text}**" if best else text

        head = ["Architecture", "Params (M)", "FLOPs (G)"]
        if self.has_accuracy:
            head.append("Accuracy (%)")
        head += ["Params ratio", "FLOPs ratio"]
        out = [" | ".join(head)]
        for r in self.rows:
            cols = [r.name, cell(f"{r.params_m:.2f}", r.best.get("params")),
                    cell(f"{r.flops_g:.2f}", r.best.get("flops"))]
            if self.has_accuracy:
                acc = "-" if r.accuracy is None else f"{100 * r.accuracy:.1f}"
                cols.append(cell(acc, r.best.get("accuracy")))
            cols += [f"{r.param_ratio:.1f}×", f"{r.flop_ratio:.1f}×"]
            out.append(" | ".join(cols))
        return "\n".join(out)


def compare(reports: Sequence[AnalyzerReport], metrics: Optional[Sequence] = None) -> ComparisonTable:
    """Side-by-side comparison; ratios are reference (first row) over each row.

    ``metrics`` items may be MetricsReport-like objects (``.accuracy``),
    plain floats in [0, 1], or ``None``.
    """
    if len(reports) < 2:
        raise ValueError("compare needs at least two reports")
    if metrics is not None and len(metrics) != len(reports):
        raise ValueError(f"{len(metrics)} metrics for {len(reports)} reports")
    ref = reports[0]
    rows = []
    for i, rep in enumerate(reports):
        acc = None
        if metrics is not None and metrics[i] is not None:
            acc = getattr(metrics[i], "accuracy", metrics[i])
        rows.append(ComparisonRow(rep.name, rep.params_m, rep.flops_g, acc,
                                  param_ratio=ref.total_params / rep.total_params,
                                  flop_ratio=ref.total_flops / rep.total_flops))
    min_p = min(r.total_params for r in reports)
    min_f = min(r.total_flops for r in reports)
    accs = [r.accuracy for r in rows if r.accuracy is not None]
    for rep, row in zip(reports, rows):
        row.best = {"params": rep.total_params == min_p, "flops": rep.total_flops == min_f}
        if accs:
            row.best["accuracy"] = row.accuracy is not None and math.isclose(row.accuracy, max(accs))
    return ComparisonTable(rows, has_accuracy=bool(accs))
