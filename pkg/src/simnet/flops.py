"""Static FLOP and parameter accounting for a :class:`NetworkSpec`.

Convention: add, sub, mul, abs and compare cost 1 FLOP each; exp, log and
pow cost ``transcendental`` FLOPs (10 by default).  Per produced value:

* linear similarity over d inputs: d mul + (d-1) add, plus d mul if weighted
* lp similarity over d inputs:     d sub + d abs + d pow + d mul + (d-1) add
* MEX over m inputs:               m add (offsets, if any) + m exp + (m-1) add
                                   + 1 log + 2 scalar ops

The whitening convolution is charged as an unweighted linear similarity.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .network import NetworkSpec
from .tensor import ShapeError


@dataclass(frozen=True)
class CostModel:
    add: int = 1
    mul: int = 1
    abs: int = 1
    compare: int = 1
    transcendental: int = 10

    def __post_init__(self):
        if min(self.add, self.mul, self.abs, self.compare, self.transcendental) < 1:
            raise ValueError("every unit cost must be >= 1")


def linear_value_cost(d: int, weighted: bool, model: CostModel = CostModel()) -> int:
    cost = d * model.mul + (d - 1) * model.add
    if weighted:
        cost += d * model.mul
    return cost


def lp_value_cost(d: int, model: CostModel = CostModel()) -> int:
    return d * model.add + d * model.abs + d * model.transcendental + d * model.mul + (d - 1) * model.add


def mex_cost(m: int, offsets: bool, model: CostModel = CostModel()) -> int:
    cost = m * model.transcendental + (m - 1) * model.add + model.transcendental + 2 * model.mul
    if offsets:
        cost += m * model.add
    return cost


@dataclass
class StageCost:
    name: str
    flops: int
    params: int
    detail: str = ""


@dataclass
class CostReport:
    stages: list = field(default_factory=list)

    @property
    def total_flops(self) -> int:
        return sum(s.flops for s in self.stages)

    @property
    def total_params(self) -> int:
        return sum(s.params for s in self.stages)

    def format_table(self) -> str:
        rows = [("stage", "FLOPs", "params", "detail")]
        rows += [(s.name, f"{s.flops:,}", f"{s.params:,}", s.detail) for s in self.stages]
        rows.append(("total", f"{self.total_flops:,}", f"{self.total_params:,}", ""))
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        out = []
        for r in rows:
            out.append(f"{r[0]:<{widths[0]}}  {r[1]:>{widths[1]}}  {r[2]:>{widths[2]}}  {r[3]}".rstrip())
        return "\n".join(out)

    def format_tsv(self) -> str:
        lines = ["stage\tflops\tparams"]
        lines += [f"{s.name}\t{s.flops}\t{s.params}" for s in self.stages]
        lines.append(f"total\t{self.total_flops}\t{self.total_params}")
        return "\n".join(lines)


def count_costs(spec: NetworkSpec, input_shape, model: CostModel = CostModel()) -> CostReport:
    """Per-stage FLOPs and parameter counts to classify one ``(H, W, C)`` input."""
    h, w, c = input_shape
    report = CostReport()
    for i, (layer, pool) in enumerate(zip(spec.layers, spec.pools)):
        d_in = layer.geom.patch_dim(c)
        if layer.filters.shape[1] != d_in:
            raise ShapeError(f"layer {i}: filters expect dim {layer.filters.shape[1]}, input gives {d_in}")
        h, w = layer.geom.output_shape(h, w)
        locs = h * w
        d_out = layer.filters.shape[0]
        report.stages.append(StageCost(
            f"layer{i}.conv", locs * d_out * linear_value_cost(d_in, False, model),
            layer.filters.size, f"{h}x{w} locations, {d_out} filters of dim {d_in}"))
        sim = layer.sim
        n = sim.n_templates
        per_value = (lp_value_cost(d_out, model) if sim.kind == "lp"
                     else linear_value_cost(d_out, sim.weighted, model))
        params = sim.templates.size + (sim.weights.size if sim.weighted else 0) + (1 if sim.kind == "lp" else 0)
        report.stages.append(StageCost(
            f"layer{i}.sim", locs * n * per_value, params, f"{n} {sim.kind} templates of dim {d_out}"))
        c = n
        if pool is not None:
            ph, pw = pool.output_shape(h, w)
            m = h * w if pool.global_pool else pool.window_h * pool.window_w
            report.stages.append(StageCost(
                f"layer{i}.pool", ph * pw * c * mex_cost(m, False, model), 0,
                f"{ph}x{pw}x{c} outputs, MEX over {m}"))
            h, w = ph, pw
    k = spec.n_classes
    has_b = spec.offsets is not None
    report.stages.append(StageCost(
        "classify", h * w * k * mex_cost(c, has_b, model), spec.offsets.size if has_b else 0,
        f"{h}x{w} locations x {k} classes, MEX over {c}"))
    report.stages.append(StageCost(
        "global_pool", k * mex_cost(h * w, False, model), 0, f"{k} classes, MEX over {h * w}"))
    return report


def compare_with_reference(report: CostReport, ref_flops: float, ref_params: float) -> str:
    """Ratio of counted to externally reported figures, with the usual reasons they differ."""
    fr = report.total_flops / ref_flops
    pr = report.total_params / ref_params
    return "\n".join([
        f"flops   counted {report.total_flops:,}  reference {ref_flops:,.0f}  ratio {fr:.3f}",
        f"params  counted {report.total_params:,}  reference {ref_params:,.0f}  ratio {pr:.3f}",
        "Differences come from the counting convention (1 FLOP per add/mul/abs,",
        "a fixed cost per exp/log/pow), from unpublished details such as the",
        "whitening dimension of each layer, and from whether MEX parameters and",
        "biases are counted; this report counts W, z, u, p and offsets only.",
    ])
