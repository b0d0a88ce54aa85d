"""MAD outlier inference over per-class CEPA statistics and the final verdict."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

MAD_SCALE = 1.4826
MAD_FLOOR = 1e-12
DEFAULT_THRESHOLD = 2.0


def mad_anomaly_indices(stats, direction="low"):
    """One-sided robust z-scores: |s - median| / (1.4826 * MAD) on the stated tail.

    Entries on the other side of the median score 0. Non-finite entries are
    left out of the null and score 0. Returns (indices, degenerate) where
    ``degenerate`` flags a zero MAD (replaced by a 1e-12 floor).
    """
    if direction not in ("low", "high"):
        raise ValueError("direction must be 'low' or 'high'")
    s = np.asarray(stats, dtype=np.float64)
    finite = np.isfinite(s)
    out = np.zeros(len(s))
    if finite.sum() == 0:
        return out, True
    med = np.median(s[finite])
    mad = np.median(np.abs(s[finite] - med))
    degenerate = bool(mad == 0)
    scale = MAD_SCALE * max(mad, MAD_FLOOR)
    dev = (med - s) if direction == "low" else (s - med)
    out[finite] = np.maximum(dev[finite], 0.0) / scale
    return out, degenerate


@dataclass
class LayerTable:
    layer: int
    consensus: dict          # target -> sigma/||mu||
    mu_norm: dict            # target -> ||mu||
    idx_consensus: dict = field(default_factory=dict)
    idx_mu: dict = field(default_factory=dict)
    degenerate: bool = False

    @classmethod
    def build(cls, layer, consensus, mu_norm):
        targets = sorted(consensus)
        if sorted(mu_norm) != targets:
            raise ValueError(f"layer {layer}: consensus and mu-norm tables cover different targets")
        ic, dc = mad_anomaly_indices([consensus[t] for t in targets], "low")
        im, dm = mad_anomaly_indices([mu_norm[t] for t in targets], "high")
        return cls(layer, {t: float(consensus[t]) for t in targets}, {t: float(mu_norm[t]) for t in targets},
                   dict(zip(targets, map(float, ic))), dict(zip(targets, map(float, im))), dc or dm)


@dataclass
class DetectionReport:
    tables: dict             # layer -> LayerTable
    threshold: float
    detected: dict           # target -> layer giving the most extreme consensus index
    selected_layer: int

    @property
    def verdict(self):
        return "poisoned" if self.detected else "clean"

    @property
    def detected_targets(self):
        return sorted(self.detected)

    def to_dict(self):
        layers = {}
        for layer, tab in sorted(self.tables.items()):
            layers[str(layer)] = {
                str(t): {
                    "consensus": _num(tab.consensus[t]),
                    "mu_norm": _num(tab.mu_norm[t]),
                    "idx_consensus": _num(tab.idx_consensus[t]),
                    "idx_mu": _num(tab.idx_mu[t]),
                }
                for t in sorted(tab.consensus)
            }
        return {
            "schema": "cepa-report/1",
            "layers": layers,
            "degenerate_layers": [l for l, tab in sorted(self.tables.items()) if tab.degenerate],
            "selected_layer": self.selected_layer,
            "verdict": self.verdict,
            "detected_targets": self.detected_targets,
            "detection_layers": {str(t): l for t, l in sorted(self.detected.items())},
            "threshold": self.threshold,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        tables = {}
        for layer, rows in d["layers"].items():
            layer = int(layer)
            tab = LayerTable(layer, {}, {})
            for t, row in rows.items():
                t = int(t)
                tab.consensus[t] = _den(row["consensus"])
                tab.mu_norm[t] = _den(row["mu_norm"])
                tab.idx_consensus[t] = _den(row["idx_consensus"])
                tab.idx_mu[t] = _den(row["idx_mu"])
            tab.degenerate = layer in d.get("degenerate_layers", [])
            tables[layer] = tab
        detected = {int(t): int(l) for t, l in d.get("detection_layers", {}).items()}
        return cls(tables, float(d["threshold"]), detected, d.get("selected_layer"))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _num(v):
    # JSON has no infinity; the degenerate-consensus sentinel is written as a string
    if math.isnan(v):
        return "nan"
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def _den(v):
    return float(v)


def decide(tables, threshold=DEFAULT_THRESHOLD, expected_targets=None):
    """Flag class t when, in some layer, both its low-tail consensus index and
    its high-tail mu-norm index exceed ``threshold``.

    ``tables`` maps layer -> LayerTable (or layer -> {target: CepaRun}).
    """
    tables = {layer: _as_table(layer, t) for layer, t in tables.items()}
    if not tables:
        raise ValueError("decide: no layers scanned")
    targets = None
    for layer, tab in tables.items():
        if targets is None:
            targets = sorted(tab.consensus)
        elif sorted(tab.consensus) != targets:
            raise ValueError(f"incomplete scan: layer {layer} covers {sorted(tab.consensus)}, expected {targets}")
    if expected_targets is not None and targets != sorted(expected_targets):
        raise ValueError(f"incomplete scan: targets {targets}, expected {sorted(expected_targets)}")
    detected = {}
    for t in targets:
        best = None
        for layer in sorted(tables):
            tab = tables[layer]
            if tab.idx_consensus[t] > threshold and tab.idx_mu[t] > threshold:
                if best is None or tab.idx_consensus[t] > tables[best].idx_consensus[t]:
                    best = layer
        if best is not None:
            detected[t] = best
    selected = max(sorted(tables), key=lambda l: max(tables[l].idx_consensus.values()))
    return DetectionReport(tables, float(threshold), detected, selected)


def _as_table(layer, tab):
    if isinstance(tab, LayerTable):
        return tab
    # degenerate runs stay in the table but drop out of the MAD null (index 0)
    cons = {t: math.inf if r.degenerate else r.consensus for t, r in tab.items()}
    mu = {t: math.nan if r.degenerate else r.mu_norm for t, r in tab.items()}
    return LayerTable.build(layer, cons, mu)
