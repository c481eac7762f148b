"""Inference-time cost audit: MAC counts, spike counts and an energy estimate.

Energy per layer is ``macs * e_mac * (1 - sparsity) + spikes * e_spike``.
Convolution and linear layers contribute MACs; a layer's MAC discount is the
sparsity of its input when that input is a spike tensor, and 0 otherwise.
LIF sites contribute 0 MACs and their spike count. Residual adds, batch norm,
pooling and pointwise activations are not counted.
"""
import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import BatchNotOne, ClockWentBackwards, SparsityOutOfRange
from .model import REFERENCE_PARAMS_M, count_params
from .tensor import no_grad

E_MAC = 12.5e-12     # J per multiply-accumulate
E_SPIKE = 77e-15     # J per spike
REFERENCE_ENERGY_J = 1.74
ALT_REFERENCE_ENERGY_J = 1.15
FOOTER = ("MACs cover convolution and linear layers only; residual adds, batch norm, "
          "pooling and activations are excluded. Energy is an estimate from fixed "
          "per-op constants, not a measurement.")
PARAM_CAVEAT = ("The reference layer inventory is not fully specified; this build fills the "
                "gaps with its own choices, so the counts are not expected to coincide.")


def conv_macs(c_in, c_out, k, out_dims):
    """``c_in * c_out * k^3 * prod(out_dims)`` as an exact integer."""
    n = int(c_in) * int(c_out) * int(k) ** 3
    for d in out_dims:
        n *= int(d)
    return n


def layer_energy(macs, sparsity, spikes, e_mac=E_MAC, e_spike=E_SPIKE):
    if not 0.0 <= sparsity <= 1.0 or math.isnan(sparsity):
        raise SparsityOutOfRange(f"sparsity must lie in [0, 1], got {sparsity}")
    return float(macs) * e_mac * (1.0 - sparsity) + float(spikes) * e_spike


@dataclass
class LayerAudit:
    name: str
    kind: str                 # "conv" or "lif"
    macs: int = 0
    spikes_in_window: int = 0
    n_active: int = 0
    n_total: int = 0
    sparsity: float = 0.0
    energy_j: float = 0.0


class Recorder:
    """Sink passed through a forward pass; layers report their work here.

    Repeated calls under one name (e.g. a head applied twice) accumulate.
    """

    def __init__(self, e_mac=E_MAC, e_spike=E_SPIKE):
        self.e_mac, self.e_spike = e_mac, e_spike
        self.layers = {}

    def _entry(self, name, kind):
        if name not in self.layers:
            self.layers[name] = LayerAudit(name, kind)
        return self.layers[name]

    def conv(self, name, c_in, c_out, k, out_dims, n, input_spikes):
        e = self._entry(name, "conv")
        e.macs += conv_macs(c_in, c_out, k, out_dims) * int(n)
        if input_spikes is not None:
            e.n_active += input_spikes[0]
            e.n_total += input_spikes[1]

    def lif(self, name, active, total):
        e = self._entry(name, "lif")
        e.spikes_in_window += int(active)
        e.n_active += int(active)
        e.n_total += int(total)

    def finalize(self):
        out = []
        for e in self.layers.values():
            e.sparsity = 1.0 - e.n_active / e.n_total if e.n_total else 0.0
            if e.kind == "lif":
                e.energy_j = layer_energy(0, e.sparsity, e.spikes_in_window, self.e_mac, self.e_spike)
            else:
                e.energy_j = layer_energy(e.macs, e.sparsity, 0, self.e_mac, self.e_spike)
            out.append(e)
        return out


@dataclass
class EfficiencyReport:
    layers: list
    total_macs: int
    total_spikes: int
    total_energy_j: float
    param_count: int
    params_millions: float
    timings: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["reference"] = {"params_millions": REFERENCE_PARAMS_M, "energy_j": REFERENCE_ENERGY_J,
                          "energy_j_alt": ALT_REFERENCE_ENERGY_J}
        d["notes"] = [FOOTER, PARAM_CAVEAT]
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "macs", "sparsity", "spikes", "energy_j"])
        for e in self.layers:
            w.writerow([e.name, e.macs, f"{e.sparsity:.6f}", e.spikes_in_window, f"{e.energy_j:.6e}"])
        return buf.getvalue()

    def to_text(self):
        width = max([len(e.name) for e in self.layers] + [5])
        lines = [f"{'layer':<{width}}  {'MACs':>14}  {'sparsity':>8}  {'spikes':>10}  {'energy (J)':>11}"]
        for e in self.layers:
            lines.append(f"{e.name:<{width}}  {e.macs:>14d}  {e.sparsity:>8.4f}  "
                         f"{e.spikes_in_window:>10d}  {e.energy_j:>11.4e}")
        lines += [
            "",
            f"total MACs      {self.total_macs}",
            f"total spikes    {self.total_spikes}",
            f"energy          {self.total_energy_j:.6e} J   (reference: {REFERENCE_ENERGY_J} J; "
            f"also quoted as {ALT_REFERENCE_ENERGY_J} J)",
            f"parameters      {self.param_count} ({self.params_millions:.2f}M)   "
            f"(reference: {REFERENCE_PARAMS_M}M)",
            "",
            PARAM_CAVEAT,
            FOOTER,
        ]
        return "\n".join(lines) + "\n"


def summarize(audits, model, timings=()):
    total_e = math.fsum(e.energy_j for e in audits)
    n = count_params(model)
    return EfficiencyReport(
        layers=audits,
        total_macs=sum(e.macs for e in audits),
        total_spikes=sum(e.spikes_in_window for e in audits),
        total_energy_j=total_e,
        param_count=n,
        params_millions=n / 1e6,
        timings=list(timings),
        config=model.cfg.to_dict())


def audit_forward(model, x, e_mac=E_MAC, e_spike=E_SPIKE, timings=()):
    """Eval-mode forward of a single sample ``x: (T, 1, C, D, H, W)`` with full accounting."""
    shape = np.shape(x.data if hasattr(x, "data") else x)
    if len(shape) != 6 or shape[1] != 1:
        raise BatchNotOne(f"audit needs input shaped (T, 1, C, D, H, W), got {shape}")
    rec = Recorder(e_mac, e_spike)
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            model.forward(x, recorder=rec)
    finally:
        model.training = was_training
    return summarize(rec.finalize(), model, timings)


class epoch_timer:
    """Monotonic wall timer. Use as a context manager or via :meth:`elapsed`.

    ``epoch_timer.elapsed(start, end)`` is the difference of two monotonic
    readings and refuses negative intervals.
    """

    def __init__(self, clock=time.monotonic):
        self.clock = clock
        self.start = self.end = None

    def __enter__(self):
        self.start = self.clock()
        return self

    def __exit__(self, *exc):
        self.end = self.clock()
        return False

    @property
    def seconds(self):
        return self.elapsed(self.start, self.end)

    @staticmethod
    def elapsed(start, end):
        if end < start:
            raise ClockWentBackwards(f"end {end} precedes start {start}")
        return float(end - start)
