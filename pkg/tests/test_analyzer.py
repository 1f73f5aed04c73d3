from __future__ import annotations

import csv
import io
import json

import numpy as np
import pytest

from mast import analyzer
from mast.errors import ConfigError
from mast.model import init_params, param_shapes
from mast.schedule import ATTN, MMSA, BlockSpec, PatchSpec, StageSchedule, make_schedule, scale_schedule

MAST_FEATURES = (
    ["96×8192"] * 3 + ["192×2048"] * 3 + ["384×512"] * 16 + ["768×256"] * 3 + ["527"]
)


def toy():
    # 8x8 input, 4x4 patches -> 2x2 grid, N = 4 + 1, d = 8
    return StageSchedule("toy", PatchSpec(8, 4, 4, 0), (BlockSpec(ATTN, 8, 8, 2),), (2,), input_shape=(8, 8))


def test_mast_trace_strings():
    assert [str(f) for f in analyzer.shape_trace(make_schedule("mast-b"))] == MAST_FEATURES


def test_ast_trace_strings():
    assert [str(f) for f in analyzer.shape_trace(make_schedule("ast"))] == ["768×1212"] * 13 + ["527"]


def test_no_pool_trace_constant():
    feats = analyzer.shape_trace(make_schedule("no-pool"))[:-1]
    assert len({str(f) for f in feats}) == 1


def test_grid_annotation():
    rep = analyzer.analyze(make_schedule("mast-b"))
    text = rep.to_text()
    for cell in ("96×(8192=32×256)", "192×(2048=16×128)", "384×(512=8×64)", "768×(256=8×32)"):
        assert cell in text


def test_head_params_hand_count():
    rows = analyzer.analyze(make_schedule("mast-b")).rows
    head = [r for r in rows if r.kind == "head"]
    assert len(head) == 1 and head[0].params == 527 * 768 + 527 == 405_263


def test_ast_uniform_block_macs():
    rows = analyzer.analyze(make_schedule("ast")).rows
    blocks = [r for r in rows if r.kind == ATTN]
    assert len(blocks) == 12
    assert all(r.macs == 1213 * 12 * 768**2 for r in blocks)
    assert abs(blocks[0].macs / 1e9 - 8.6) < 0.05


def test_toy_macs_hand_expanded():
    s = toy()
    n, d, hid = 5, 8, 32
    patch = 8 * 1 * 4 * 4 * 4
    block = 3 * n * d * d + n * d * d + n * d * hid + n * hid * d
    head = d * 2
    assert analyzer.count_macs(s) == [patch, block, 0, head]
    # full mode adds q k^T and attn v, plus rel-pos logits on the 2x2 grid
    extra = 2 * n * n * d + 4 * (2 + 2) * d
    assert analyzer.count_macs(s, mode="full") == [patch, block + extra, 0, head]


def test_toy_params_hand_count():
    d, hid = 8, 32
    patch = 8 * 16 + 8 + 8  # kernel, bias, class token
    block = 2 * d + 3 * (d * d + d) + d * d + d + (3 + 3) * (d // 2) + 2 * d + d * hid + hid + hid * d + d
    assert analyzer.count_params(toy()) == [patch, block, 2 * d, d * 2 + 2]


@pytest.mark.parametrize("name", ["mast-b", "ast", "no-pool", "first-pool-only", "two-pools", "2d-at-21", "mast-tiny", "gradcheck-tiny"])
def test_param_count_matches_model_allocation(name):
    s = make_schedule(name)
    allocated = sum(int(np.prod(v)) for v in param_shapes(s).values())
    assert analyzer.analyze(s).total_params == allocated


def test_param_count_matches_initialized_tensors():
    s = make_schedule("mast-tiny")
    assert init_params(s).num_params() == analyzer.analyze(s).total_params


@pytest.mark.parametrize("name", ["mast-b", "ast", "2d-at-21"])
def test_full_mode_dominates(name):
    s = make_schedule(name)
    proj = analyzer.count_macs(s)
    full = analyzer.count_macs(s, mode="full")
    assert all(f >= p for f, p in zip(full, proj))


def test_totals_are_row_sums():
    rep = analyzer.analyze(make_schedule("mast-b"), mode="full")
    assert rep.total_params == sum(r.params for r in rep.rows)
    assert rep.total_macs == sum(r.macs for r in rep.rows)


def test_compare_self_is_one():
    s = make_schedule("mast-tiny")
    c = analyzer.compare(s, s)
    assert c.param_ratio == 1.0 and all(c.mac_ratio(m) == 1.0 for m in analyzer.MODES)


def test_compare_mast_vs_ast():
    c = analyzer.compare(make_schedule("mast-b"), make_schedule("ast"))
    assert abs(c.param_ratio - 0.58) <= 0.06
    assert abs(c.mac_ratio() - 0.24) <= 0.06


def test_compare_tiny_hand_ratio():
    a = toy()
    b = StageSchedule("toy2", PatchSpec(8, 4, 4, 0), (BlockSpec(ATTN, 8, 8, 2),) * 2, (2,), input_shape=(8, 8))
    pa, pb = sum(analyzer.count_params(a)), sum(analyzer.count_params(b))
    block = analyzer.count_params(a)[1]
    assert pb == pa + block
    c = analyzer.compare(a, b)
    assert c.param_ratio == pa / pb
    ma = analyzer.count_macs(a)
    assert c.mac_ratio() == sum(ma) / (sum(ma) + ma[1])


def test_csv_and_json_round_trip():
    rep = analyzer.analyze(make_schedule("mast-tiny"))
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert int(rows[-1]["params"]) == rep.total_params
    assert sum(int(r["macs"]) for r in rows[:-1]) == rep.total_macs
    doc = json.loads(rep.to_json())
    assert doc["totals"]["params"] == rep.total_params and len(doc["rows"]) == len(rep.rows)


def test_bad_mode_and_bad_input():
    with pytest.raises(ConfigError):
        analyzer.count_macs(make_schedule("ast"), mode="flops")
    with pytest.raises(ConfigError):
        analyzer.shape_trace(make_schedule("ast"), (8, 8))


def test_scaled_schedule_trace():
    s = scale_schedule(make_schedule("mast-b"), 8, (32, 128))
    feats = analyzer.shape_trace(s)
    assert str(feats[0]) == "12×256" and str(feats[-2]) == "96×8"
    assert any(b.kind == MMSA for b in s.blocks)
