import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forgemorph.costmodel import CostEstimate, PEAllocation, allocation_bounds, estimate
from forgemorph.exceptions import DegenerateFit, EmptyBlock, InvalidCut, MalformedDocument, TooNarrow
from forgemorph.morph import (
    AffinePowerModel,
    ModeRegistry,
    PowerModel,
    default_boundaries,
    depth_mode,
    fit_power_model,
    gating_savings,
    interior_pe_demand,
    merge_manifest,
    parse_mode,
    partition_blocks,
    predict_power,
    read_calibration_csv,
    resident_footprint,
    width_assignment,
    width_mode,
)
from forgemorph.netgraph import parse_network

from conftest import DATA, residual_doc

ALLOC = PEAllocation((4, 8, 16), 8)


# -- blocks ---------------------------------------------------------------------

def test_default_partition(mnist):
    blocks = partition_blocks(mnist)
    assert [b.block_id for b in blocks] == ["A", "B", "C"]
    assert [b.layer_ids for b in blocks] == [("conv1", "pool1"), ("conv2", "pool2"), ("conv3", "pool3")]
    assert blocks[0].output_head.fc_in == 14 * 14 * 8
    assert all(b.output_head.fc_out == 10 for b in blocks)


def test_single_boundary_gives_two_blocks(mnist):
    blocks = partition_blocks(mnist, ["pool1"])
    assert [b.layer_ids for b in blocks] == [("conv1", "pool1"), ("conv2", "pool2", "conv3", "pool3")]
    assert partition_blocks(mnist, [])[0].layer_ids[-1] == "pool3"


def test_invalid_cuts(mnist):
    res = parse_network(residual_doc())
    with pytest.raises(InvalidCut):
        partition_blocks(res, ["c1"])   # the shortcut from c0 crosses this cut
    assert [b.exit_layer for b in partition_blocks(res, ["c0"])] == ["c0", "merge"]
    assert default_boundaries(res) == ["c0", "merge"]
    with pytest.raises(InvalidCut):
        partition_blocks(mnist, ["fc"])
    with pytest.raises(InvalidCut):
        partition_blocks(mnist, ["nope"])
    with pytest.raises(EmptyBlock):
        partition_blocks(mnist, ["pool1", "pool1"])


# -- depth ----------------------------------------------------------------------

def test_depth_full_equals_base_plus_heads(mnist, zynq):
    blocks = partition_blocks(mnist)
    full = estimate(mnist, ALLOC, zynq)
    mode = depth_mode(mnist, blocks, 3, ALLOC, zynq)
    assert mode.estimate.latency_s == pytest.approx(full.latency_s)
    heads = resident_footprint(mnist, blocks, ALLOC, zynq).dsp - full.dsp
    assert heads > 0
    assert mode.estimate.dsp == full.dsp + heads == mode.resident.dsp
    assert mode.active_alloc == ALLOC


def test_depth_monotone(mnist, zynq):
    blocks = partition_blocks(mnist)
    modes = [depth_mode(mnist, blocks, k, ALLOC, zynq) for k in (1, 2, 3)]
    lat = [m.estimate.latency_s for m in modes]
    dsp = [m.estimate.dsp for m in modes]
    assert lat[0] < lat[1] < lat[2]
    assert dsp[0] < dsp[1] < dsp[2]
    assert modes[0].resident == modes[1].resident == modes[2].resident
    assert modes[0].active_alloc.conv_pe == (4, 0, 0)
    assert modes[0].active_widths == (8, 0, 0)
    assert modes[1].switch_latency_s == modes[1].estimate.latency_s
    with pytest.raises(ValueError):
        depth_mode(mnist, blocks, 4, ALLOC, zynq)


# -- width ----------------------------------------------------------------------

def test_width_assignment_rule():
    assert width_assignment(8, 4, 1.0) == (8, 4, 2)
    assert width_assignment(8, 4, 0.5) == (4, 2, 2)
    assert width_assignment(8, 3, 0.5) == (4, 2, 3)
    assert width_assignment(5, 5, 0.5) == (2, 2, 1)
    assert width_assignment(8, 1, 0.25) == (2, 1, 2)
    with pytest.raises(TooNarrow):
        width_assignment(3, 3, 0.3)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.floats(0.01, 1.0))
def test_width_assignment_invariants(n, p, f):
    p = min(p, n)
    try:
        active, pes, load = width_assignment(n, p, f)
    except TooNarrow:
        assert int(f * n) == 0
        return
    assert 1 <= active <= n and 1 <= pes <= p and load >= 1
    assert pes * load >= active   # the gated PEs still cover the active filters
    assert load <= -(-n // p)     # no PE takes on more filters than it was wired for


def test_width_identity_at_full(mnist, zynq):
    mode = width_mode(mnist, 1.0, ALLOC, zynq)
    assert mode.estimate == estimate(mnist, ALLOC, zynq)
    assert mode.active_widths == (8, 16, 32)


def test_width_half_mnist(mnist, zynq):
    mode = width_mode(mnist, 0.5, ALLOC, zynq)
    assert mode.active_widths == (4, 8, 16)
    assert mode.active_alloc.conv_pe == (2, 4, 8)
    full = interior_pe_demand(mnist, ALLOC)
    half = interior_pe_demand(mnist, mode.active_alloc)
    assert sum(half) / sum(full) == pytest.approx(0.25, abs=0.02)
    assert mode.resident == estimate(mnist, ALLOC, zynq)


def test_width_monotone(mnist, zynq):
    modes = [width_mode(mnist, f, ALLOC, zynq) for f in (0.25, 0.5, 0.75, 1.0)]
    for a, b in zip(modes, modes[1:]):
        assert a.estimate.dsp <= b.estimate.dsp
        assert a.estimate.lut <= b.estimate.lut
        assert a.estimate.latency_s <= b.estimate.latency_s * (1 + 1e-12)


def test_width_too_narrow(mnist, zynq):
    with pytest.raises(TooNarrow):
        width_mode(mnist, 0.1, ALLOC, zynq)   # 0.1 * 8 filters floors to 0
    with pytest.raises(ValueError):
        width_mode(mnist, 1.5, ALLOC, zynq)
    with pytest.raises(ValueError):
        width_mode(mnist, 0.0, ALLOC, zynq)


def test_width_with_heads(mnist, zynq):
    blocks = partition_blocks(mnist)
    plain = width_mode(mnist, 0.5, ALLOC, zynq)
    with_heads = width_mode(mnist, 0.5, ALLOC, zynq, blocks=blocks)
    assert with_heads.estimate.dsp > plain.estimate.dsp
    assert with_heads.resident == depth_mode(mnist, blocks, 1, ALLOC, zynq).resident


def test_parse_mode():
    assert parse_mode("depth:2") == ("depth", 2)
    assert parse_mode("width:0.5") == ("width", 0.5)
    for bad in ("depth", "depth:x", "width:half", "height:2"):
        with pytest.raises(ValueError):
            parse_mode(bad)


# -- power ----------------------------------------------------------------------

CAL = [((1556, 192000, 356), 743.0), ((485, 66000, 98), 660.0),
       ((179, 24000, 29), 578.0), ((35, 6590, 9), 475.0)]


def test_power_fit_on_calibration():
    model = fit_power_model(CAL)
    assert min(model.coef_dsp, model.coef_lut, model.coef_bram) >= 0
    preds = [model.predict(*r) for r, _ in CAL]
    assert preds == sorted(preds, reverse=True)  # rows are listed largest first
    for (r, mw), pred in zip(CAL, preds):
        assert abs(pred - mw) <= 2 * model.fit_residual
    assert read_calibration_csv(DATA / "mnist_power_calibration.csv") == CAL


def test_power_constant_data():
    rows = [((1, 0, 0), 5.0), ((0, 1, 0), 5.0), ((0, 0, 1), 5.0), ((0, 0, 0), 5.0)]
    model = fit_power_model(rows)
    assert model.base_mw == pytest.approx(5.0)
    assert (model.coef_dsp, model.coef_lut, model.coef_bram) == pytest.approx((0, 0, 0), abs=1e-9)


def test_power_exact_affine_recovery():
    rng = np.random.default_rng(0)
    X = rng.integers(0, 2000, size=(12, 3))
    y = 300 + X @ np.array([0.2, 0.001, 0.5])
    model = fit_power_model(list(zip(map(tuple, X), y)))
    assert (model.base_mw, model.coef_dsp, model.coef_lut, model.coef_bram) == \
        pytest.approx((300, 0.2, 0.001, 0.5), rel=1e-6)


def test_power_prediction_clamped():
    model = PowerModel(base_mw=-50, coef_dsp=1, coef_lut=0, coef_bram=0)
    assert model.predict(0, 0, 0) == 0.0
    assert model.predict(60, 0, 0) == 10.0


def test_power_degenerate():
    with pytest.raises(DegenerateFit):
        fit_power_model(CAL[:3])
    collinear = [((i, 2 * i, 3 * i), float(i)) for i in range(1, 6)]
    with pytest.raises(DegenerateFit):
        fit_power_model(collinear)


def test_power_model_io(tmp_path):
    model = fit_power_model(CAL)
    model.save(tmp_path / "pm.json")
    assert PowerModel.load(tmp_path / "pm.json") == model
    (tmp_path / "bad.json").write_text('{"base_mw": 1}')
    with pytest.raises(MalformedDocument):
        PowerModel.load(tmp_path / "bad.json")


def test_affine_estimator_api():
    X = np.array([r for r, _ in CAL], dtype=float)
    y = np.array([mw for _, mw in CAL])
    est = AffinePowerModel().fit(X, y)
    assert est.get_params() == {"nonnegative": True}
    assert est.predict(X).shape == (4,)
    assert (est.predict(np.zeros((1, 3))) >= 0).all()


def test_predict_power_and_savings(mnist, zynq):
    model = fit_power_model(CAL)
    blocks = partition_blocks(mnist)
    e = estimate(mnist, ALLOC, zynq)
    assert predict_power(model, e) == e.power_mw > 0
    shallow = depth_mode(mnist, blocks, 1, ALLOC, zynq)
    full = depth_mode(mnist, blocks, 3, ALLOC, zynq)
    assert gating_savings(model, shallow) > 0
    assert gating_savings(model, full) == pytest.approx(0)


# -- manifest and registry --------------------------------------------------------

def test_manifest_merge(mnist, zynq):
    blocks = partition_blocks(mnist)
    m1 = depth_mode(mnist, blocks, 1, ALLOC, zynq)
    m1.accuracy = 0.91
    doc = merge_manifest(None, ALLOC, m1)
    doc = merge_manifest(doc, ALLOC, width_mode(mnist, 0.5, ALLOC, zynq))
    doc = merge_manifest(doc, ALLOC, depth_mode(mnist, blocks, 1, ALLOC, zynq))
    assert [m["name"] for m in doc["modes"]] == ["depth:1", "width:0.5"]
    assert doc["modes"][0]["accuracy"] == 0.91
    with pytest.raises(MalformedDocument):
        merge_manifest(doc, PEAllocation((1, 1, 1), 1), m1)


def test_registry_concurrent_access(mnist, zynq):
    reg = ModeRegistry()
    blocks = partition_blocks(mnist)
    modes = [depth_mode(mnist, blocks, k, ALLOC, zynq) for k in (1, 2, 3)]
    reg.register(modes[0])
    errors = []

    def reader():
        try:
            for _ in range(500):
                entry = reg.get("depth:1")
                assert entry["kind"] == "depth"
                reg.names()
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    def writer():
        for _ in range(200):
            for m in modes[1:]:
                reg.register(m)
            reg.remove("depth:2")

    threads = [threading.Thread(target=reader) for _ in range(4)] + [threading.Thread(target=writer)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=30)
    assert not errors
    assert reg.names() == ["depth:1", "depth:3"]
    with pytest.raises(KeyError):
        reg.get("depth:2")
