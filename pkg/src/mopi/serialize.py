"""JSON round-trips for pretrained components, set families and rules.

A rule file references its pretrained components by content hash; the
components themselves live in a separate artifacts file mapping hash to
component JSON. Loading checks every referenced hash against the
recomputed hash of the stored component.
"""

from __future__ import annotations

import json

from .core import MopiError
from .datagen import partition_from_dict
from .pretrain import (ConstantScales, GlobalCovariance, GroupedScales, KnnMean, LinearMean,
                       NllCovarianceNet, ScaledWhitener)
from .sets import FAMILIES, SCORES, Box, Ellipsoid, PredictionRule, Sublevel
from .shapes import SHAPES, IndicatorShape, TwoLayerMlp

RULE_FORMAT = "mopi-rule"
RULE_VERSION = 1


class HashMismatch(MopiError, ValueError):
    pass


class FormatError(MopiError, ValueError):
    pass


# --------------------------------------------------------------------------
# shapes

def shape_from_dict(d):
    kind = d["kind"]
    if kind not in SHAPES:
        raise FormatError(f"unknown shape kind {kind!r}")
    m, p = int(d["m"]), d["params"]
    if kind == "constant":
        return SHAPES[kind](m, p)
    if kind == "indicator":
        return IndicatorShape(m, p, partition_from_dict(d["partition"]), d["levels"])
    if kind == "linear":
        return SHAPES[kind](m, p, d["d_x"], d["feature_map"])
    if kind == "rkhs":
        return SHAPES[kind](m, p, d["anchors"], d["bandwidth"])
    return TwoLayerMlp(m, p, d["d_x"], d["width"], d["x_shift"], d["x_scale"])


# --------------------------------------------------------------------------
# pretrained components

def component_from_dict(d):
    kind = d["kind"]
    if kind == "linear_mean":
        return LinearMean(d["W"], d["b"])
    if kind == "knn_mean":
        return KnnMean(d["X"], d["Y"], d["k"])
    if kind == "constant_scales":
        return ConstantScales(d["sigma"])
    if kind == "grouped_scales":
        return GroupedScales(partition_from_dict(d["partition"]), d["levels"], d["table"])
    if kind == "global_covariance":
        return GlobalCovariance(d["cov"], d["inv_sqrt"])
    if kind == "nll_covariance_net":
        return NllCovarianceNet(shape_from_dict(d["net"]), d["d_y"])
    if kind == "scaled_whitener":
        return ScaledWhitener(component_from_dict(d["base"]), d["scale"])
    raise FormatError(f"unknown component kind {kind!r}")


def artifacts_dict(components) -> dict:
    return {c.content_hash(): c.to_dict() for c in components}


def load_artifacts(d: dict) -> dict:
    """Rebuild components, rejecting entries whose content no longer matches
    the hash they are filed under."""
    out = {}
    for h, cd in d.items():
        comp = component_from_dict(cd)
        if comp.content_hash() != h:
            raise HashMismatch(f"artifact {h} hashes to {comp.content_hash()}")
        out[h] = comp
    return out


def _ref(artifacts, h):
    if h not in artifacts:
        raise HashMismatch(f"no artifact with hash {h}")
    return artifacts[h]


# --------------------------------------------------------------------------
# families

def family_to_dict(family) -> dict:
    refs = {k: c.content_hash() for k, c in family.components().items()}
    d = {"kind": family.kind, "d_y": family.d_y, "components": refs}
    if isinstance(family, Sublevel):
        d["score"] = family.score.kind
    return d


def family_from_dict(d, artifacts):
    comps = {k: _ref(artifacts, h) for k, h in d["components"].items()}
    kind = d["kind"]
    if kind == "sublevel":
        score = SCORES[d["score"]](**comps)
        return Sublevel(score, d["d_y"])
    if kind == "box":
        return Box(comps["mean"], comps["scales"], d["d_y"])
    if kind == "ellipsoid":
        return Ellipsoid(comps["mean"], comps["whitener"], d["d_y"])
    raise FormatError(f"unknown family {kind!r} (known: {sorted(FAMILIES)})")


def family_components(family) -> list:
    return list(family.components().values())


# --------------------------------------------------------------------------
# rules

def rule_to_dict(rule: PredictionRule) -> dict:
    return {
        "format": RULE_FORMAT,
        "version": RULE_VERSION,
        "method": rule.method,
        "config_hash": rule.config_hash,
        "family": family_to_dict(rule.family),
        "shape": rule.shape.to_dict(),
        "meta": _plain(rule.meta),
    }


def rule_from_dict(d, artifacts) -> PredictionRule:
    if d.get("format") != RULE_FORMAT:
        raise FormatError("not a prediction-rule document")
    if d.get("version") != RULE_VERSION:
        raise FormatError(f"unsupported rule version {d.get('version')!r}")
    family = family_from_dict(d["family"], artifacts)
    return PredictionRule(family, shape_from_dict(d["shape"]), d["method"], d["config_hash"], d.get("meta", {}))


def save_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if hasattr(obj, "tolist"):
        return obj.tolist()
    return obj
