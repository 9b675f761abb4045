"""Versioned text persistence for trained models.

Models are stored as JSON: diffable, language-portable, and small at
the scales this package targets.  Floats are emitted with Python's
shortest-repr encoding, so ``load(save(model))`` reproduces every
coefficient bit-for-bit and therefore every prediction.
"""

from __future__ import annotations

import dataclasses
import json
import os

import numpy as np

from .data import NormalizationTransform
from .errors import DataError
from .kernels import KernelSpec
from .loss import LossSpec
from .trainer import TrainedModel

__all__ = ["FORMAT_VERSION", "save_model", "load_model",
           "model_to_dict", "model_from_dict"]

FORMAT_VERSION = 1


def _jsonable(v):
    """Recursively convert numpy/dataclass values to plain JSON types."""
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if dataclasses.is_dataclass(v) and not isinstance(v, type):
        return _jsonable(dataclasses.asdict(v))
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if v is None or isinstance(v, (bool, int, float, str)):
        return v
    return str(v)


def model_to_dict(model: TrainedModel) -> dict:
    norm = None
    if model.normalizer is not None:
        norm = {"mins": model.normalizer.mins.tolist(),
                "maxs": model.normalizer.maxs.tolist()}
    return {
        "format_version": FORMAT_VERSION,
        "kernel": {"kind": model.kernel.kind, "q": float(model.kernel.q),
                   "rbf_form": model.kernel.rbf_form},
        "loss": {"taus": list(model.loss.taus),
                 "epsilons": list(model.loss.epsilons)},
        "c0": float(model.c0),
        "normalizer": norm,
        "support_x": np.asarray(model.support_x, dtype=float).tolist(),
        "beta": np.asarray(model.beta, dtype=float).tolist(),
        "bias": float(model.bias),
        "diagnostics": _jsonable(model.diagnostics),
    }


def _require(cond, msg):
    if not cond:
        raise DataError(f"model file: {msg}")


def model_from_dict(doc: dict) -> TrainedModel:
    _require(isinstance(doc, dict), "top level must be an object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError(
            f"unsupported model format_version {version!r} "
            f"(this build reads version {FORMAT_VERSION})")
    for key in ("kernel", "loss", "c0", "support_x", "beta", "bias"):
        _require(key in doc, f"missing field {key!r}")
    kern = doc["kernel"]
    _require(isinstance(kern, dict) and "kind" in kern, "bad kernel block")
    kernel = KernelSpec(kind=kern["kind"], q=float(kern.get("q", 1.0)),
                        rbf_form=kern.get("rbf_form", "squared-distance"))
    loss_doc = doc["loss"]
    _require(isinstance(loss_doc, dict), "bad loss block")
    loss = LossSpec(taus=tuple(float(t) for t in loss_doc.get("taus", ())),
                    epsilons=tuple(float(e)
                                   for e in loss_doc.get("epsilons", ())))
    support = np.asarray(doc["support_x"], dtype=float)
    beta = np.asarray(doc["beta"], dtype=float)
    _require(support.ndim == 2, "support_x must be a 2-D array")
    _require(beta.ndim == 1 and beta.size == support.shape[0],
             "beta length must match the number of support points")
    _require(np.all(np.isfinite(support)) and np.all(np.isfinite(beta)),
             "support points and coefficients must be finite")
    norm = None
    if doc.get("normalizer") is not None:
        nd = doc["normalizer"]
        _require(isinstance(nd, dict) and "mins" in nd and "maxs" in nd,
                 "bad normalizer block")
        mins = np.asarray(nd["mins"], dtype=float)
        maxs = np.asarray(nd["maxs"], dtype=float)
        _require(mins.shape == maxs.shape == (support.shape[1],),
                 "normalizer bounds must match the feature count")
        norm = NormalizationTransform(mins=mins, maxs=maxs)
    return TrainedModel(kernel=kernel, loss=loss, c0=float(doc["c0"]),
                        support_x=support, beta=beta,
                        bias=float(doc["bias"]), normalizer=norm,
                        diagnostics=doc.get("diagnostics", {}) or {})


def save_model(model: TrainedModel, path) -> str:
    """Write the model atomically (write-then-rename); returns ``path``."""
    path = os.fspath(path)
    doc = model_to_dict(model)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def load_model(path) -> TrainedModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a valid model file: {exc}") from exc
    return model_from_dict(doc)
