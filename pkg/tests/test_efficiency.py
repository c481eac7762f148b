import csv
import io
import json
import math
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fastersnn.efficiency import (E_MAC, E_SPIKE, Recorder, audit_forward,
                                  conv_macs, epoch_timer, layer_energy)
from fastersnn.errors import BatchNotOne, ClockWentBackwards, SparsityOutOfRange
from fastersnn.layers import center_bounds
from fastersnn.lif import LifConfig
from fastersnn.model import build_model
from synthdata import TINY


def expected_macs(cfg, T):
    """Total MACs for one sample, derived from the architecture description."""
    vol = lambda d: int(np.prod(d))
    dims = cfg.input_dims
    c0 = cfg.stage_channels[0]
    total = cfg.in_channels * c0 * 27 * vol(dims) * T
    c_in = c0
    for c, swa in zip(cfg.stage_channels, cfg.swa_stages):
        v = vol(dims)
        core = vol([center_bounds(n, cfg.center_fraction)[1] for n in dims])
        per_step = c * c * 27 * core + c * 27 * v + c * c * v
        if c_in != c:
            per_step += c_in * c * 27 * v
        if swa:
            q = c // 4
            per_step += c * q + q * c + c * q * v + q * v
        total += per_step * T
        dims = tuple(n // 2 for n in dims)
        c_in = c
    m = cfg.msf_out_channels
    level_dims = [tuple(n >> (i + 1) for n in cfg.input_dims) for i in range(4)]
    used = range(4) if cfg.use_msf else [3]
    total += sum(cfg.stage_channels[i] * m * vol(level_dims[i]) for i in used) * T
    total += m * cfg.n_classes * (T + 1)          # per-step head plus the fused head
    return total


def _input(rng, cfg, T=None, scale=2.0):
    T = T or cfg.T
    return (rng.standard_normal((T, 1, 1) + cfg.input_dims) * scale).astype(np.float32)


# --- arithmetic ----------------------------------------------------------------

def test_conv_macs_examples():
    assert conv_macs(1, 2, 3, (4, 4, 4)) == 3456
    assert conv_macs(1, 1, 1, (1, 1, 1)) == 1
    assert conv_macs(4, 1, 3, (2, 2, 2)) == 864


@given(st.integers(1, 512), st.integers(1, 512), st.integers(1, 7),
       st.tuples(*[st.integers(1, 128)] * 3))
def test_conv_macs_is_product(ci, co, k, dims):
    assert conv_macs(ci, co, k, dims) == ci * co * k * k * k * dims[0] * dims[1] * dims[2]


def test_layer_energy_examples():
    assert abs(layer_energy(3456, 0.5, 100) - 2.16077e-8) <= 1e-15
    assert layer_energy(3456, 1.0, 0) == 0.0
    assert layer_energy(3456, 0.0, 0) == 3456 * E_MAC


def test_layer_energy_rejects_bad_sparsity():
    for s in (-0.1, 1.5, float("nan")):
        with pytest.raises(SparsityOutOfRange):
            layer_energy(10, s, 0)


@given(st.integers(0, 10 ** 9), st.integers(0, 10 ** 6), st.floats(0, 1), st.floats(0, 1))
def test_energy_monotone_in_sparsity(macs, spikes, s1, s2):
    lo, hi = sorted((s1, s2))
    assert layer_energy(macs, hi, spikes) <= layer_energy(macs, lo, spikes)


def test_recorder_accumulates_repeated_names():
    rec = Recorder()
    rec.conv("head", 4, 3, 1, (1, 1, 1), 2, None)
    rec.conv("head", 4, 3, 1, (1, 1, 1), 1, None)
    rec.lif("site", 3, 10)
    rec.conv("after", 2, 2, 1, (1, 1, 1), 5, (3, 10))
    audits = {a.name: a for a in rec.finalize()}
    assert audits["head"].macs == 36
    assert audits["site"].macs == 0 and audits["site"].spikes_in_window == 3
    assert audits["site"].energy_j == 3 * E_SPIKE
    assert audits["after"].sparsity == pytest.approx(0.7)
    assert audits["after"].energy_j == pytest.approx(20 * E_MAC * 0.3)


# --- audits -------------------------------------------------------------------------

def test_audit_macs_match_architecture(rng):
    model = build_model(TINY)
    rep = audit_forward(model, _input(rng, TINY))
    assert rep.total_macs == expected_macs(TINY, TINY.T)


@pytest.mark.parametrize("cfg", [TINY.with_(use_msf=False), TINY.with_(lif=LifConfig(T=3)),
                                 TINY.with_(stage_channels=(8, 8, 16, 16), classifier_hidden=0)])
def test_audit_macs_other_configs(rng, cfg):
    rep = audit_forward(build_model(cfg), _input(rng, cfg))
    assert rep.total_macs == expected_macs(cfg, cfg.T)


def test_macs_input_independent(rng):
    model = build_model(TINY)
    a = audit_forward(model, _input(rng, TINY))
    b = audit_forward(model, _input(rng, TINY, scale=5.0))
    assert a.total_macs == b.total_macs
    assert [e.macs for e in a.layers] == [e.macs for e in b.layers]


def test_totals_equal_sums(rng):
    rep = audit_forward(build_model(TINY), _input(rng, TINY))
    assert rep.total_energy_j == math.fsum(e.energy_j for e in rep.layers)
    assert rep.total_macs == sum(e.macs for e in rep.layers)
    assert rep.total_spikes == sum(e.spikes_in_window for e in rep.layers)
    assert rep.total_spikes > 0
    for e in rep.layers:
        assert 0 <= e.sparsity <= 1 and e.energy_j >= 0 and math.isfinite(e.energy_j)
        if e.n_total:
            assert e.sparsity == pytest.approx(1 - e.n_active / e.n_total)


def test_zero_input_audit():
    model = build_model(TINY)
    rep = audit_forward(model, np.zeros((2, 1, 1, 16, 16, 16), np.float32))
    assert rep.total_spikes == 0
    spike_fed = [e for e in rep.layers if e.kind == "conv" and e.n_total]
    assert spike_fed and all(e.sparsity == 1.0 and e.energy_j == 0 for e in spike_fed)
    dense = sum(e.macs for e in rep.layers if e.kind == "conv" and not e.n_total)
    assert rep.total_energy_j == pytest.approx(dense * E_MAC, rel=1e-12)


def test_doubling_T_doubles_window(rng):
    one = audit_forward(build_model(TINY.with_(lif=LifConfig(T=1))), _input(rng, TINY, T=1))
    two = audit_forward(build_model(TINY.with_(lif=LifConfig(T=2))), _input(rng, TINY, T=2))
    head = TINY.msf_out_channels * TINY.n_classes
    # everything but the fused head scales with T
    assert two.total_macs - head == 2 * (one.total_macs - head)
    n1 = {e.name: e.n_total for e in one.layers if e.kind == "lif"}
    n2 = {e.name: e.n_total for e in two.layers if e.kind == "lif"}
    assert n2 == {k: 2 * v for k, v in n1.items()}


def test_doubling_T_zero_input_doubles_energy():
    z1 = audit_forward(build_model(TINY.with_(lif=LifConfig(T=1))), np.zeros((1, 1, 1, 16, 16, 16)))
    z2 = audit_forward(build_model(TINY.with_(lif=LifConfig(T=2))), np.zeros((2, 1, 1, 16, 16, 16)))
    head = TINY.msf_out_channels * TINY.n_classes * E_MAC
    assert z2.total_energy_j - head == pytest.approx(2 * (z1.total_energy_j - head), rel=1e-12)


def test_without_lif_is_dense(rng):
    cfg = TINY.with_(use_lif=False)
    rep = audit_forward(build_model(cfg), _input(rng, cfg))
    assert rep.total_spikes == 0
    assert all(e.sparsity == 0 for e in rep.layers)
    assert rep.total_energy_j == pytest.approx(rep.total_macs * E_MAC, rel=1e-12)


def test_audit_requires_single_sample(rng):
    model = build_model(TINY)
    with pytest.raises(BatchNotOne):
        audit_forward(model, np.zeros((2, 2, 1, 16, 16, 16), np.float32))


def test_audit_restores_training_flag(rng):
    model = build_model(TINY).train()
    audit_forward(model, _input(rng, TINY))
    assert model.training


def test_report_serialisations(rng):
    rep = audit_forward(build_model(TINY), _input(rng, TINY))
    d = json.loads(rep.to_json())
    assert d["reference"]["params_millions"] == 43.11 and d["reference"]["energy_j"] == 1.74
    assert d["param_count"] == rep.param_count and d["config"]["input_dims"] == [16, 16, 16]
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert rows[0] == ["name", "macs", "sparsity", "spikes", "energy_j"]
    assert len(rows) == len(rep.layers) + 1
    text = rep.to_text()
    assert "43.11M" in text and "1.74 J" in text and "1.15 J" in text
    assert f"{rep.param_count}" in text


# --- timing -----------------------------------------------------------------------------

def test_timer_equal_events():
    assert epoch_timer.elapsed(5.0, 5.0) == 0.0


def test_timer_sleep():
    with epoch_timer() as t:
        time.sleep(0.1)
    assert 0.09 <= t.seconds <= 0.5


def test_timer_backwards():
    with pytest.raises(ClockWentBackwards):
        epoch_timer.elapsed(2.0, 1.0)


def test_epoch_time_in_training_log():
    from fastersnn.training import TrainConfig, fit
    from synthdata import encoded
    res = fit(build_model(TINY), encoded(1), TrainConfig(max_epochs=1))
    assert res.history[0]["wall_time_s"] > 0
