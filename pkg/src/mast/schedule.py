"""Machine-readable stage schedules (block kinds, widths, pooling strides, heads)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from .errors import ConfigError

ATTN = "Attn"
MMSA = "MMSA"


@dataclass(frozen=True)
class PatchSpec:
    dim: int
    kernel: int
    stride: int
    pad: int
    in_channels: int = 1


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    dim_in: int
    dim_out: int
    heads: int
    pool_stride_f: int = 1
    pool_stride_t: int = 1
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.kind not in (ATTN, MMSA):
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if self.pool_stride_f < 1 or self.pool_stride_t < 1:
            raise ConfigError("pooling strides must be >= 1")
        pooled = self.pool_stride_f > 1 or self.pool_stride_t > 1
        if self.kind == ATTN and (self.dim_in != self.dim_out or pooled):
            raise ConfigError("Attn blocks keep their width and do not pool")
        if self.kind == MMSA and (self.dim_out != 2 * self.dim_in or not pooled):
            raise ConfigError("MMSA blocks double the width and pool along at least one axis")
        if self.heads < 1 or self.dim_out % self.heads:
            raise ConfigError(f"{self.heads} heads do not divide width {self.dim_out}")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")

    @property
    def head_dim(self) -> int:
        return self.dim_out // self.heads

    @property
    def hidden_dim(self) -> int:
        return int(round(self.dim_out * self.mlp_ratio))

    @property
    def strides(self) -> tuple[int, int]:
        return self.pool_stride_f, self.pool_stride_t


@dataclass(frozen=True)
class StageSchedule:
    """Patch embedding, ordered blocks and classifier heads.

    ``input_shape`` is the (mel bins, frames) spectrogram the schedule is laid
    out for; relative-position table sizes depend on it.
    """

    name: str
    patch: PatchSpec
    blocks: tuple[BlockSpec, ...]
    head_sizes: tuple[int, ...]
    input_shape: tuple[int, int] = (128, 1024)
    ln_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "head_sizes", tuple(int(c) for c in self.head_sizes))
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        if not self.blocks:
            raise ConfigError("a schedule needs at least one block")
        if not self.head_sizes or min(self.head_sizes) < 1:
            raise ConfigError("a schedule needs at least one head with >= 1 class")
        width = self.patch.dim
        for i, b in enumerate(self.blocks):
            if b.dim_in != width:
                raise ConfigError(f"block {i} expects width {b.dim_in} but receives {width}")
            width = b.dim_out

    @property
    def final_dim(self) -> int:
        return self.blocks[-1].dim_out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        d["head_sizes"] = list(self.head_sizes)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageSchedule":
        try:
            return cls(
                name=d.get("name", "custom"),
                patch=PatchSpec(**d["patch"]),
                blocks=tuple(BlockSpec(**b) for b in d["blocks"]),
                head_sizes=tuple(d["head_sizes"]),
                input_shape=tuple(d.get("input_shape", (128, 1024))),
                ln_eps=float(d.get("ln_eps", 1e-6)),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed schedule document: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def with_heads(self, head_sizes) -> "StageSchedule":
        return replace(self, head_sizes=tuple(head_sizes))


def _attn(dim: int, heads: int) -> BlockSpec:
    return BlockSpec(ATTN, dim, dim, heads)


def _mmsa(dim_in: int, heads: int, sf: int, st: int) -> BlockSpec:
    return BlockSpec(MMSA, dim_in, 2 * dim_in, heads, sf, st)


def _multiscale(
    name: str,
    pools: dict[int, tuple[int, int]],
    depth: int = 24,
    base_dim: int = 96,
    head_dim: int = 96,
    head_sizes=(527,),
) -> StageSchedule:
    blocks = []
    dim = base_dim
    for i in range(depth):
        if i in pools:
            sf, st = pools[i]
            blocks.append(_mmsa(dim, (2 * dim) // head_dim, sf, st))
            dim *= 2
        else:
            blocks.append(_attn(dim, dim // head_dim))
    return StageSchedule(name, PatchSpec(base_dim, 7, 4, 3), tuple(blocks), tuple(head_sizes))


MAST_POOLS = {2: (2, 2), 5: (2, 2), 21: (1, 2)}

ABLATIONS = {
    "no-pool": {},
    "first-pool-only": {2: (2, 2)},
    "two-pools": {2: (2, 2), 5: (2, 2)},
    "2d-at-21": {2: (2, 2), 5: (2, 2), 21: (2, 2)},
}


def _ast(head_sizes=(527,)) -> StageSchedule:
    return StageSchedule(
        "ast", PatchSpec(768, 16, 10, 0), tuple(_attn(768, 12) for _ in range(12)), tuple(head_sizes)
    )


def _mast_tiny() -> StageSchedule:
    # mast-b pattern with widths / 8 and one block per stage plus the stem
    blocks = (
        _attn(12, 1),
        _mmsa(12, 2, 2, 2),
        _attn(24, 2),
        _mmsa(24, 4, 2, 2),
        _attn(48, 4),
        _mmsa(48, 8, 1, 2),
        _attn(96, 8),
    )
    return StageSchedule("mast-tiny", PatchSpec(12, 7, 4, 3), blocks, (4,), input_shape=(32, 128))


def _gradcheck_tiny() -> StageSchedule:
    blocks = (_mmsa(8, 2, 2, 2), _attn(16, 2))
    return StageSchedule("gradcheck-tiny", PatchSpec(8, 7, 4, 3), blocks, (3,), input_shape=(16, 32))


def _ast_tiny() -> StageSchedule:
    blocks = tuple(_attn(24, 2) for _ in range(3))
    return StageSchedule("ast-tiny", PatchSpec(24, 8, 8, 0), blocks, (4,), input_shape=(32, 128))


PRESETS = {
    "mast-b": lambda: _multiscale("mast-b", MAST_POOLS),
    "ast": _ast,
    **{name: (lambda n=name: _multiscale(n, ABLATIONS[n])) for name in ABLATIONS},
    "mast-tiny": _mast_tiny,
    "gradcheck-tiny": _gradcheck_tiny,
    "ast-tiny": _ast_tiny,
}


def make_schedule(preset: str) -> StageSchedule:
    """Build a named preset (``mast-b``, ``ast``, an ablation, or a tiny test schedule)."""
    try:
        return PRESETS[preset]()
    except KeyError:
        known = ", ".join(sorted(PRESETS))
        raise ConfigError(f"unknown schedule preset {preset!r} (known: {known})") from None


def load_schedule(ref: str | Path) -> StageSchedule:
    """Resolve a preset name or a path to a JSON schedule document."""
    ref = str(ref)
    if ref in PRESETS:
        return make_schedule(ref)
    path = Path(ref)
    if path.suffix == ".json" or path.exists():
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read schedule file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"schedule file {path} is not valid JSON: {exc}") from exc
        return StageSchedule.from_dict(doc)
    return make_schedule(ref)


def scale_schedule(
    schedule: StageSchedule,
    divisor: int,
    input_shape: tuple[int, int],
    head_sizes=None,
    name: str | None = None,
) -> StageSchedule:
    """Same block structure with every width divided by ``divisor``.

    Head counts are kept, so each width must stay divisible by its heads.
    """
    def div(n: int) -> int:
        if n % divisor:
            raise ConfigError(f"width {n} is not divisible by {divisor}")
        return n // divisor

    patch = replace(schedule.patch, dim=div(schedule.patch.dim))
    blocks = tuple(replace(b, dim_in=div(b.dim_in), dim_out=div(b.dim_out)) for b in schedule.blocks)
    return StageSchedule(
        name or f"{schedule.name}/{divisor}",
        patch,
        blocks,
        tuple(head_sizes or schedule.head_sizes),
        input_shape=tuple(input_shape),
        ln_eps=schedule.ln_eps,
    )


__all__ = [
    "ATTN",
    "MMSA",
    "PatchSpec",
    "BlockSpec",
    "StageSchedule",
    "ABLATIONS",
    "PRESETS",
    "make_schedule",
    "load_schedule",
    "scale_schedule",
]
