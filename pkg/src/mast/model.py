"""The multiscale audio spectrogram transformer.

Tokens are stored batch-first, ``B x N x d``, with the class token at row 0
followed by the ``freq x time`` grid in frequency-major order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError
from .kernels import pooled_extent
from .numerics import Tensor
from .schedule import MMSA, BlockSpec, StageSchedule

# query rows x keys x heads above which inference attention is evaluated in chunks
_CHUNK_ELEMENTS = 1 << 23


@dataclass(frozen=True)
class TokenGrid:
    freq_extent: int
    time_extent: int
    has_class_token: bool = True

    def __post_init__(self):
        if self.freq_extent < 1 or self.time_extent < 1:
            raise DimensionError(f"grid extents must be >= 1, got {self.freq_extent}x{self.time_extent}")

    @property
    def n_grid(self) -> int:
        return self.freq_extent * self.time_extent

    @property
    def n_tokens(self) -> int:
        return self.n_grid + int(self.has_class_token)

    def pooled(self, stride_f: int, stride_t: int) -> "TokenGrid":
        f = pooled_extent(self.freq_extent, stride_f)
        t = pooled_extent(self.time_extent, stride_t)
        if f < 1 or t < 1:
            raise DimensionError(f"pooling {self.freq_extent}x{self.time_extent} by ({stride_f},{stride_t}) leaves no tokens")
        return TokenGrid(f, t, self.has_class_token)


@dataclass
class TokenTensor:
    tokens: Tensor
    grid: TokenGrid

    def __post_init__(self):
        if self.tokens.ndim != 3 or self.tokens.shape[1] != self.grid.n_tokens:
            raise DimensionError(
                f"token tensor {self.tokens.shape} does not match grid with {self.grid.n_tokens} tokens"
            )

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]


@dataclass
class RelPosTable:
    r_t: Tensor
    r_f: Tensor


# ---------------------------------------------------------------------------
# static geometry


def patch_grid(schedule: StageSchedule) -> TokenGrid:
    p = schedule.patch
    h, t = schedule.input_shape
    return TokenGrid(
        nx.conv_output_extent(h, p.kernel, p.stride, p.pad),
        nx.conv_output_extent(t, p.kernel, p.stride, p.pad),
    )


def block_grids(schedule: StageSchedule) -> list[tuple[TokenGrid, TokenGrid]]:
    """(input grid, output grid) for every block."""
    grid = patch_grid(schedule)
    out = []
    for b in schedule.blocks:
        nxt = grid.pooled(b.pool_stride_f, b.pool_stride_t)
        out.append((grid, nxt))
        grid = nxt
    return out


def rel_table_lengths(grid_q: TokenGrid, grid_k: TokenGrid) -> tuple[int, int]:
    """Rows of the (time, frequency) offset tables for a query/key grid pair."""
    return (
        2 * max(grid_q.time_extent, grid_k.time_extent) - 1,
        2 * max(grid_q.freq_extent, grid_k.freq_extent) - 1,
    )


def rel_index(n_q: int, n_k: int) -> np.ndarray:
    """Table row for every (query, key) coordinate pair along one axis.

    Coordinates of the coarser axis are scaled by the integer resolution ratio
    so both sides are compared on the finer grid.
    """
    big, small = max(n_q, n_k), min(n_q, n_k)
    if big % small:
        raise ConfigError(f"grid extents {n_q} and {n_k} have a non-integer ratio")
    ratio_q = n_k // n_q if n_k > n_q else 1
    ratio_k = n_q // n_k if n_q > n_k else 1
    q = np.arange(n_q)[:, None] * ratio_q
    k = np.arange(n_k)[None, :] * ratio_k
    return q - k + (n_k - 1) * ratio_k


def param_shapes(schedule: StageSchedule) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape the model allocates for ``schedule``."""
    p = schedule.patch
    shapes: dict[str, tuple[int, ...]] = {
        "patch.weight": (p.dim, p.in_channels, p.kernel, p.kernel),
        "patch.bias": (p.dim,),
        "cls_token": (1, p.dim),
    }
    for i, (b, (_, g_out)) in enumerate(zip(schedule.blocks, block_grids(schedule))):
        pre = f"blocks.{i}."
        lt, lf = rel_table_lengths(g_out, g_out)
        shapes.update({
            pre + "norm1.gamma": (b.dim_in,),
            pre + "norm1.beta": (b.dim_in,),
            pre + "attn.wq": (b.dim_in, b.dim_out),
            pre + "attn.bq": (b.dim_out,),
            pre + "attn.wk": (b.dim_in, b.dim_out),
            pre + "attn.bk": (b.dim_out,),
            pre + "attn.wv": (b.dim_in, b.dim_out),
            pre + "attn.bv": (b.dim_out,),
            pre + "attn.wo": (b.dim_out, b.dim_out),
            pre + "attn.bo": (b.dim_out,),
            pre + "attn.rel_t": (lt, b.head_dim),
            pre + "attn.rel_f": (lf, b.head_dim),
            pre + "norm2.gamma": (b.dim_out,),
            pre + "norm2.beta": (b.dim_out,),
            pre + "mlp.w1": (b.dim_out, b.hidden_dim),
            pre + "mlp.b1": (b.hidden_dim,),
            pre + "mlp.w2": (b.hidden_dim, b.dim_out),
            pre + "mlp.b2": (b.dim_out,),
        })
        if b.kind == MMSA:
            shapes[pre + "res.weight"] = (b.dim_in, b.dim_out)
            shapes[pre + "res.bias"] = (b.dim_out,)
    d = schedule.final_dim
    shapes["norm.gamma"] = (d,)
    shapes["norm.beta"] = (d,)
    for j, c in enumerate(schedule.head_sizes):
        shapes[f"heads.{j}.weight"] = (d, c)
        shapes[f"heads.{j}.bias"] = (c,)
    return shapes


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ModelParams:
    schedule: StageSchedule
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def block(self, i: int) -> dict[str, Tensor]:
        pre = f"blocks.{i}."
        return {k[len(pre):]: v for k, v in self.tensors.items() if k.startswith(pre)}

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.schedule, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.schedule,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()},
        )

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self.tensors.values():
            t.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def validate(self) -> None:
        expected = param_shapes(self.schedule)
        actual = {k: tuple(v.shape) for k, v in self.tensors.items()}
        if expected != actual:
            missing = sorted(set(expected) - set(actual))
            extra = sorted(set(actual) - set(expected))
            wrong = sorted(k for k in set(expected) & set(actual) if expected[k] != actual[k])
            raise ConfigError(f"parameter mismatch: missing={missing} extra={extra} wrong_shape={wrong}")


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal draws with |z| > bound resampled."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > bound
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > bound
    return z * std


_ZERO_INIT = {"beta", "bias", "bq", "bk", "bv", "bo", "b1", "b2"}


def init_params(schedule: StageSchedule, seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(schedule).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            arr = np.ones(shape)
        elif leaf in _ZERO_INIT:
            arr = np.zeros(shape)
        else:
            arr = trunc_normal(rng, shape)
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return ModelParams(schedule, tensors)


# ---------------------------------------------------------------------------
# layers


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = nx.matmul(x, w)
    return y if b is None else y + b


def _as_batch(values) -> tuple[np.ndarray, bool]:
    arr = getattr(values, "values", values)
    arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    if arr.ndim == 2:
        return arr[None], True
    if arr.ndim == 3:
        return arr, False
    raise DimensionError(f"expected a (mels, frames) spectrogram or a batch of them, got shape {arr.shape}")


def patch_embed(spec, params: ModelParams, schedule: StageSchedule | None = None) -> TokenTensor:
    """Strided convolution over the spectrogram, flattened frequency-major, class token first."""
    schedule = schedule or params.schedule
    x, _ = _as_batch(spec)
    if tuple(x.shape[1:]) != tuple(schedule.input_shape):
        raise DimensionError(f"spectrogram {x.shape[1:]} does not match schedule input {schedule.input_shape}")
    p = schedule.patch
    w = params["patch.weight"]
    xt = Tensor(x[:, None].astype(w.dtype, copy=False))
    y = nx.conv2d(xt, w, params["patch.bias"], p.stride, p.stride, p.pad, p.pad)
    B, d, F, T = y.shape
    tokens = nx.transpose(y, (0, 2, 3, 1)).reshape(B, F * T, d)
    cls = nx.broadcast_to(params["cls_token"].reshape(1, 1, d), (B, 1, d))
    return TokenTensor(nx.concat([cls, tokens], axis=1), TokenGrid(F, T, True))


def pool_tokens(x: TokenTensor, stride_f: int, stride_t: int) -> TokenTensor:
    """Mean-pool the grid tokens; the class token passes through unchanged."""
    if stride_f < 1 or stride_t < 1:
        raise DimensionError("pooling strides must be >= 1")
    if stride_f == 1 and stride_t == 1:
        return x
    g = x.grid
    new_grid = g.pooled(stride_f, stride_t)
    B, _, d = x.tokens.shape
    start = int(g.has_class_token)
    grid = x.tokens[:, start:].reshape(B, g.freq_extent, g.time_extent, d)
    pooled = nx.avg_pool_grid(grid, stride_f, stride_t).reshape(B, new_grid.n_grid, d)
    if g.has_class_token:
        pooled = nx.concat([x.tokens[:, :1], pooled], axis=1)
    return TokenTensor(pooled, new_grid)


def _check_table(table: RelPosTable, idx_t: np.ndarray, idx_f: np.ndarray) -> None:
    if idx_t.max() >= table.r_t.shape[0] or idx_f.max() >= table.r_f.shape[0]:
        raise ConfigError(
            f"relative-position tables ({table.r_t.shape[0]}, {table.r_f.shape[0]}) are too short "
            f"for offsets up to ({idx_t.max()}, {idx_f.max()})"
        )


def rel_pos_bias(q: Tensor, table: RelPosTable, grid_q: TokenGrid, grid_k: TokenGrid) -> Tensor:
    """Decomposed relative-position logits ``E[i, j] = q_i . (R_t[dt] + R_f[df])``.

    ``q`` is ``... x N_q x d_head``; the result is ``... x N_q x N_k``. Rows and
    columns of class tokens are zero.
    """
    if grid_q.has_class_token != grid_k.has_class_token:
        raise ConfigError("query and key grids disagree about the class token")
    idx_t = rel_index(grid_q.time_extent, grid_k.time_extent)
    idx_f = rel_index(grid_q.freq_extent, grid_k.freq_extent)
    _check_table(table, idx_t, idx_f)
    lead = q.shape[:-2]
    dh = q.shape[-1]
    qg = q[..., 1:, :] if grid_q.has_class_token else q
    qg = qg.reshape(*lead, grid_q.freq_extent, grid_q.time_extent, dh)
    rel_t = nx.einsum("...ftc,tkc->...ftk", qg, nx.take_rows(table.r_t, idx_t))
    rel_f = nx.einsum("...ftc,fgc->...ftg", qg, nx.take_rows(table.r_f, idx_f))
    fq, tq, fk, tk = grid_q.freq_extent, grid_q.time_extent, grid_k.freq_extent, grid_k.time_extent
    e = rel_t.reshape(*lead, fq, tq, 1, tk) + rel_f.reshape(*lead, fq, tq, fk, 1)
    e = e.reshape(*lead, fq * tq, fk * tk)
    if grid_q.has_class_token:
        e = nx.pad_class_border(e)
    return e


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, N, d = x.shape
    return nx.transpose(x.reshape(B, N, heads, d // heads), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, N, dh = x.shape
    return nx.transpose(x, (0, 2, 1, 3)).reshape(B, N, h * dh)


def _chunked_attention(q, k, v, table: RelPosTable, grid: TokenGrid) -> np.ndarray:
    """Inference-only attention evaluated over blocks of frequency rows."""
    B, h, N, dh = q.shape
    scale = 1.0 / math.sqrt(dh)
    idx_t = rel_index(grid.time_extent, grid.time_extent)
    idx_f = rel_index(grid.freq_extent, grid.freq_extent)
    _check_table(table, idx_t, idx_f)
    rt = table.r_t.data[idx_t]
    rf = table.r_f.data[idx_f]
    kt = np.swapaxes(k, -1, -2)
    out = np.empty_like(q)
    start = int(grid.has_class_token)

    def attend(rows: slice, bias):
        s = q[:, :, rows] @ kt
        if bias is not None:
            s = s + bias
        s *= scale
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=-1, keepdims=True)
        out[:, :, rows] = q[:, :, rows] + s @ v

    if start:
        attend(slice(0, 1), None)
    F, T = grid.freq_extent, grid.time_extent
    rows_per_chunk = max(1, _CHUNK_ELEMENTS // max(1, B * h * N * T))
    for f0 in range(0, F, rows_per_chunk):
        f1 = min(F, f0 + rows_per_chunk)
        rows = slice(start + f0 * T, start + f1 * T)
        qg = q[:, :, rows].reshape(B, h, f1 - f0, T, dh)
        bias_t = np.einsum("bhftc,tkc->bhftk", qg, rt)
        bias_f = np.einsum("bhftc,fgc->bhftg", qg, rf[f0:f1])
        bias = (bias_t[..., None, :] + bias_f[..., :, None]).reshape(B, h, (f1 - f0) * T, F * T)
        if start:
            bias = np.concatenate([np.zeros(bias.shape[:-1] + (1,), bias.dtype), bias], axis=-1)
        attend(rows, bias)
    return out


def multiscale_attention(x: TokenTensor, weights: dict[str, Tensor], spec: BlockSpec) -> TokenTensor:
    """Pooled multi-head attention with the query as an internal residual.

    ``weights`` holds ``wq, bq, wk, bk, wv, bv, wo, bo, rel_t, rel_f`` (optionally
    prefixed with ``attn.``).
    """
    w = {k.removeprefix("attn."): v for k, v in weights.items()}
    if spec.dim_out % spec.heads:
        raise ConfigError(f"{spec.heads} heads do not divide width {spec.dim_out}")
    if x.dim != spec.dim_in:
        raise DimensionError(f"block expects width {spec.dim_in}, got {x.dim}")
    sf, st = spec.strides
    q = pool_tokens(TokenTensor(linear(x.tokens, w["wq"], w["bq"]), x.grid), sf, st)
    k = pool_tokens(TokenTensor(linear(x.tokens, w["wk"], w["bk"]), x.grid), sf, st)
    v = pool_tokens(TokenTensor(linear(x.tokens, w["wv"], w["bv"]), x.grid), sf, st)
    grid = q.grid
    qh, kh, vh = (_split_heads(t.tokens, spec.heads) for t in (q, k, v))
    table = RelPosTable(w["rel_t"], w["rel_f"])
    B, h, N, dh = qh.shape
    if not nx.is_grad_enabled() and B * h * N * N > _CHUNK_ELEMENTS:
        o = Tensor(_chunked_attention(qh.data, kh.data, vh.data, table, grid))
    else:
        scores = nx.matmul(qh, nx.swapaxes(kh, -1, -2)) + rel_pos_bias(qh, table, grid, grid)
        attn = nx.softmax(scores * (1.0 / math.sqrt(dh)), axis=-1)
        o = qh + nx.matmul(attn, vh)
    out = linear(_merge_heads(o), w["wo"], w["bo"])
    return TokenTensor(out, grid)


def transformer_block(x: TokenTensor, weights: dict[str, Tensor], spec: BlockSpec, eps: float = 1e-6) -> TokenTensor:
    """Pre-norm block: attention branch plus pooled residual, then MLP branch plus residual."""
    w = weights
    xn = nx.layer_norm(x.tokens, w["norm1.gamma"], w["norm1.beta"], eps)
    attn = multiscale_attention(TokenTensor(xn, x.grid), {k: v for k, v in w.items() if k.startswith("attn.")}, spec)
    res = pool_tokens(x, *spec.strides)
    skip = res.tokens
    if spec.kind == MMSA:
        skip = linear(skip, w["res.weight"], w["res.bias"])
    x1 = attn.tokens + skip
    hidden = nx.gelu(linear(nx.layer_norm(x1, w["norm2.gamma"], w["norm2.beta"], eps), w["mlp.w1"], w["mlp.b1"]))
    out = linear(hidden, w["mlp.w2"], w["mlp.b2"]) + x1
    return TokenTensor(out, attn.grid)


@dataclass
class ForwardResult:
    logits: list[Tensor]
    embedding: Tensor
    trace: list[tuple[int, int, int]]


def forward(spec, params: ModelParams, schedule: StageSchedule | None = None) -> ForwardResult:
    """Run the network; ``spec`` is one ``mels x frames`` array or a batch.

    ``embedding`` is the class token entering the last block. ``trace`` holds
    ``(dim, freq, time)`` after the patch embedding and after every block.
    """
    schedule = schedule or params.schedule
    _, single = _as_batch(spec)
    x = patch_embed(spec, params, schedule)
    trace = [(x.dim, x.grid.freq_extent, x.grid.time_extent)]
    n = len(schedule.blocks)
    for i, b in enumerate(schedule.blocks):
        if i == n - 1:
            embedding = x.tokens[:, 0]
        x = transformer_block(x, params.block(i), b, schedule.ln_eps)
        trace.append((x.dim, x.grid.freq_extent, x.grid.time_extent))
    cls = nx.layer_norm(x.tokens[:, 0], params["norm.gamma"], params["norm.beta"], schedule.ln_eps)
    logits = [linear(cls, params[f"heads.{j}.weight"], params[f"heads.{j}.bias"]) for j in range(len(schedule.head_sizes))]
    if single:
        logits = [lg[0] for lg in logits]
        embedding = embedding[0]
    return ForwardResult(logits, embedding, trace)


__all__ = [
    "TokenGrid",
    "TokenTensor",
    "RelPosTable",
    "ModelParams",
    "ForwardResult",
    "patch_grid",
    "block_grids",
    "rel_index",
    "rel_table_lengths",
    "param_shapes",
    "init_params",
    "trunc_normal",
    "linear",
    "patch_embed",
    "pool_tokens",
    "rel_pos_bias",
    "multiscale_attention",
    "transformer_block",
    "forward",
]
