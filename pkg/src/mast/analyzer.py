"""Static parameter and MAC accounting for stage schedules.

Everything here is closed-form arithmetic over the schedule; nothing is
allocated. The model module is deliberately not consulted so that the two can
be checked against each other.

Two MAC accounting modes are supported:

``projections-only``
    parameterized maps only: the patch convolution, Q/K/V/output projections,
    MLP layers, residual expansions and classifier heads. Module-level FLOP
    counters report this number.
``full``
    additionally the two attention products, the relative-position logits and
    the pooling windows.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

from .errors import ConfigError
from .schedule import MMSA, StageSchedule

MODES = ("projections-only", "full")


def _pooled(extent: int, stride: int) -> int:
    if stride == 1:
        return extent
    return (extent + 2 - 3) // stride + 1


def _window(stride: int) -> int:
    return 3 if stride > 1 else 1


@dataclass(frozen=True)
class Feature:
    """A ``dim x (freq x time)`` token map, or a class-score vector when ``freq`` is None."""

    dim: int
    freq: int | None = None
    time: int | None = None

    @property
    def tokens(self) -> int | None:
        return None if self.freq is None else self.freq * self.time

    def __str__(self) -> str:
        if self.freq is None:
            return str(self.dim)
        return f"{self.dim}×{self.tokens}"

    def with_grid(self) -> str:
        if self.freq is None:
            return str(self.dim)
        return f"{self.dim}×({self.tokens}={self.freq}×{self.time})"


@dataclass
class ReportRow:
    name: str
    kind: str
    feature: Feature
    params: int
    macs: int


@dataclass
class ComplexityReport:
    schedule: str
    mode: str
    input_shape: tuple[int, int]
    rows: list[ReportRow]

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def to_text(self) -> str:
        h, t = self.input_shape
        lines = [
            f"schedule {self.schedule}  (MACs: {self.mode})",
            f"{'Block':<14}{'Kind':<7}{'Feature':<22}{'Params':>14}{'MACs':>18}",
            f"{'Input':<14}{'':<7}{f'1×{h}×{t}':<22}{0:>14,}{0:>18,}",
        ]
        prev = None
        for r in self.rows:
            changed = r.feature.freq is not None and (prev is None or (prev.freq, prev.time) != (r.feature.freq, r.feature.time))
            label = r.feature.with_grid() if changed else str(r.feature)
            lines.append(f"{r.name:<14}{r.kind:<7}{label:<22}{r.params:>14,}{r.macs:>18,}")
            if r.feature.freq is not None:
                prev = r.feature
        lines.append(
            f"{'Total':<43}{self.total_params:>14,}{self.total_macs:>18,}"
            f"   ({self.total_params / 1e6:.1f}M params, {self.total_macs / 1e9:.1f}G MACs)"
        )
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "kind", "dim", "freq", "time", "tokens", "params", "macs"])
        for r in self.rows:
            f = r.feature
            w.writerow([r.name, r.kind, f.dim, f.freq or "", f.time or "", f.tokens or "", r.params, r.macs])
        w.writerow(["total", "", "", "", "", "", self.total_params, self.total_macs])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "schedule": self.schedule,
            "mode": self.mode,
            "input_shape": list(self.input_shape),
            "rows": [
                {**asdict(r), "feature": str(r.feature), "dim": r.feature.dim, "freq": r.feature.freq, "time": r.feature.time}
                for r in self.rows
            ],
            "totals": {"params": self.total_params, "macs": self.total_macs},
        }
        return json.dumps(doc, indent=2)


@dataclass
class _Geometry:
    name: str
    kind: str
    feature: Feature
    n_in: int = 0
    n_out: int = 0
    grid_out: tuple[int, int] = (0, 0)


def _layout(schedule: StageSchedule, input_shape=None) -> list[_Geometry]:
    h, t = input_shape or schedule.input_shape
    p = schedule.patch
    if h + 2 * p.pad < p.kernel or t + 2 * p.pad < p.kernel:
        raise ConfigError(f"patch kernel {p.kernel} does not fit input {h}x{t}")
    f = (h + 2 * p.pad - p.kernel) // p.stride + 1
    tt = (t + 2 * p.pad - p.kernel) // p.stride + 1
    rows = [_Geometry("Patch Embed.", "patch", Feature(p.dim, f, tt), 0, f * tt, (f, tt))]
    for i, b in enumerate(schedule.blocks):
        n_in = f * tt + 1
        f, tt = _pooled(f, b.pool_stride_f), _pooled(tt, b.pool_stride_t)
        if f < 1 or tt < 1:
            raise ConfigError(f"block {i} pools the grid away")
        rows.append(_Geometry(f"Block {i}", b.kind, Feature(b.dim_out, f, tt), n_in, f * tt + 1, (f, tt)))
    d = schedule.final_dim
    rows.append(_Geometry("Norm", "norm", Feature(d, f, tt)))
    for j, c in enumerate(schedule.head_sizes):
        rows.append(_Geometry(f"Head {j}" if len(schedule.head_sizes) > 1 else "Head", "head", Feature(c)))
    return rows


def shape_trace(schedule: StageSchedule, input_shape=None) -> list[Feature]:
    """Feature shape after the patch embedding, each block and each head (class token excluded)."""
    return [g.feature for g in _layout(schedule, input_shape) if g.kind != "norm"]


def count_params(schedule: StageSchedule) -> list[int]:
    """Per-row scalar parameter counts, aligned with :func:`analyze` rows."""
    out = []
    blocks = iter(schedule.blocks)
    for g in _layout(schedule):
        if g.kind == "patch":
            p = schedule.patch
            out.append(p.dim * p.in_channels * p.kernel**2 + p.dim + p.dim)
        elif g.kind == "norm":
            out.append(2 * g.feature.dim)
        elif g.kind == "head":
            out.append(schedule.final_dim * g.feature.dim + g.feature.dim)
        else:
            b = next(blocks)
            di, do, hid = b.dim_in, b.dim_out, b.hidden_dim
            f, t = g.grid_out
            n = 2 * di  # norm1
            n += 3 * (di * do + do) + do * do + do  # q, k, v, output projection
            n += ((2 * t - 1) + (2 * f - 1)) * b.head_dim  # relative-position tables
            n += 2 * do  # norm2
            n += do * hid + hid + hid * do + do  # mlp
            if b.kind == MMSA:
                n += di * do + do  # residual expansion
            out.append(n)
    return out


def count_macs(schedule: StageSchedule, input_shape=None, mode: str = "projections-only") -> list[int]:
    """Per-row multiply-accumulates for one spectrogram."""
    if mode not in MODES:
        raise ConfigError(f"unknown MAC accounting mode {mode!r}; expected one of {MODES}")
    full = mode == "full"
    out = []
    blocks = iter(schedule.blocks)
    for g in _layout(schedule, input_shape):
        if g.kind == "patch":
            p = schedule.patch
            out.append(p.dim * p.in_channels * p.kernel**2 * g.n_out)
        elif g.kind == "norm":
            out.append(0)
        elif g.kind == "head":
            out.append(schedule.final_dim * g.feature.dim)
        else:
            b = next(blocks)
            di, do, hid = b.dim_in, b.dim_out, b.hidden_dim
            m = 3 * g.n_in * di * do  # q, k, v on the unpooled input
            m += g.n_out * do * do  # output projection
            m += 2 * g.n_out * do * hid  # mlp
            if b.kind == MMSA:
                m += g.n_out * di * do  # residual expansion
            if full:
                f, t = g.grid_out
                m += 2 * g.n_out * g.n_out * do  # q k^T and attn v, all heads
                m += f * t * (f + t) * do  # relative-position logits
                if b.kind == MMSA:
                    win = _window(b.pool_stride_f) * _window(b.pool_stride_t)
                    m += f * t * win * (3 * do + di)  # pooled q, k, v and residual
            out.append(m)
    return out


def analyze(schedule: StageSchedule, input_shape=None, mode: str = "projections-only") -> ComplexityReport:
    layout = _layout(schedule, input_shape)
    params = count_params(schedule)
    macs = count_macs(schedule, input_shape, mode)
    rows = [ReportRow(g.name, g.kind, g.feature, p, m) for g, p, m in zip(layout, params, macs)]
    return ComplexityReport(schedule.name, mode, tuple(input_shape or schedule.input_shape), rows)


@dataclass
class Comparison:
    name_a: str
    name_b: str
    params_a: int
    params_b: int
    macs_a: dict[str, int]
    macs_b: dict[str, int]
    rows: list[tuple[str, str, str, int, int]]

    @property
    def param_ratio(self) -> float:
        return self.params_a / self.params_b

    def mac_ratio(self, mode: str = "projections-only") -> float:
        return self.macs_a[mode] / self.macs_b[mode]

    def to_text(self) -> str:
        lines = [
            f"{self.name_a} vs {self.name_b}",
            f"params {self.param_ratio:.3f}  ({self.params_a / 1e6:.1f}M / {self.params_b / 1e6:.1f}M)",
        ]
        for mode in MODES:
            lines.append(
                f"macs {self.mac_ratio(mode):.3f}  [{mode}]  "
                f"({self.macs_a[mode] / 1e9:.1f}G / {self.macs_b[mode] / 1e9:.1f}G)"
            )
        lines.append(f"{'Block':<14}{self.name_a:<22}{self.name_b:<22}{'MACs ' + self.name_a:>18}{'MACs ' + self.name_b:>18}")
        for name, fa, fb, ma, mb in self.rows:
            lines.append(f"{name:<14}{fa:<22}{fb:<22}{ma:>18,}{mb:>18,}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "a": self.name_a,
            "b": self.name_b,
            "param_ratio": self.param_ratio,
            "mac_ratio": {m: self.mac_ratio(m) for m in MODES},
            "params": [self.params_a, self.params_b],
            "macs": {m: [self.macs_a[m], self.macs_b[m]] for m in MODES},
        }


def compare(a: StageSchedule, b: StageSchedule, input_shape=None) -> Comparison:
    """Parameter and MAC ratios of ``a`` relative to ``b`` plus a row-aligned diff."""
    reps_a = {m: analyze(a, input_shape, m) for m in MODES}
    reps_b = {m: analyze(b, input_shape, m) for m in MODES}
    ra, rb = reps_a["projections-only"].rows, reps_b["projections-only"].rows
    rows = []
    for i in range(max(len(ra), len(rb))):
        x = ra[i] if i < len(ra) else None
        y = rb[i] if i < len(rb) else None
        rows.append((
            (x or y).name if (x and y and x.name == y.name) else f"{x.name if x else '-'}/{y.name if y else '-'}",
            str(x.feature) if x else "-",
            str(y.feature) if y else "-",
            x.macs if x else 0,
            y.macs if y else 0,
        ))
    return Comparison(
        a.name,
        b.name,
        reps_a["projections-only"].total_params,
        reps_b["projections-only"].total_params,
        {m: r.total_macs for m, r in reps_a.items()},
        {m: r.total_macs for m, r in reps_b.items()},
        rows,
    )
