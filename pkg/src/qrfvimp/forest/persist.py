"""Versioned JSON persistence for fitted forests."""

from __future__ import annotations

import json

import numpy as np

from .data import Fingerprint
from .model import ForestConfig, ForestModel

FORMAT = "qrfvimp-forest"
VERSION = 1

__all__ = ["model_to_dict", "model_from_dict", "save_model", "load_model",
           "CorruptModelError"]


class CorruptModelError(ValueError):
    """Raised when a model document cannot be decoded."""


def model_to_dict(model: ForestModel) -> dict:
    trees = []
    for tree in model.trees():
        trees.append({
            "feature": tree.feature.tolist(),
            "threshold": tree.threshold.tolist(),
            "left": tree.left.tolist(),
            "right": tree.right.tolist(),
            "n_train": tree.n_train.tolist(),
            "n_est": tree.n_est.tolist(),
            "leaf_id": tree.leaf_id.tolist(),
            "leaf_members": [m.tolist() for m in tree.leaf_members],
        })
    return {
        "format": FORMAT,
        "version": VERSION,
        "config": model.config.to_dict(),
        "n_rows": model.n_rows,
        "n_features": model.n_features,
        "subsample_size": model.subsample_size,
        "mtry": model.mtry,
        "columns": model.columns.tolist(),
        "feature_names": list(model.feature_names),
        "fingerprint": model.fingerprint.to_dict(),
        "responses": model.responses.tolist(),
        "trees": trees,
    }


def model_from_dict(doc: dict) -> ForestModel:
    try:
        if doc.get("format") != FORMAT:
            raise CorruptModelError("not a forest model document")
        if doc.get("version") != VERSION:
            raise CorruptModelError(f"unsupported model version {doc.get('version')!r}")
        parts = {k: [] for k in ("feature", "threshold", "left", "right",
                                 "n_train", "n_est", "leaf_of_node")}
        members, leaf_ptr, node_ptr = [], [0], [0]
        n_leaves = 0
        for t in doc["trees"]:
            for k in ("feature", "threshold", "left", "right", "n_train", "n_est"):
                parts[k].extend(t[k])
            leaf_id = np.asarray(t["leaf_id"], dtype=np.int64)
            parts["leaf_of_node"].extend(np.where(leaf_id >= 0, leaf_id + n_leaves, -1).tolist())
            for m in t["leaf_members"]:
                members.extend(m)
                leaf_ptr.append(len(members))
            n_leaves += len(t["leaf_members"])
            node_ptr.append(node_ptr[-1] + len(t["feature"]))
        ints = lambda v: np.asarray(v, dtype=np.int64)  # noqa: E731
        model = ForestModel(
            ForestConfig.from_dict(doc["config"]),
            int(doc["n_rows"]), int(doc["n_features"]),
            int(doc["subsample_size"]), int(doc["mtry"]),
            ints(doc["columns"]), Fingerprint.from_dict(doc["fingerprint"]),
            np.asarray(doc["responses"], dtype=np.float64),
            ints(parts["feature"]), np.asarray(parts["threshold"], dtype=np.float64),
            ints(parts["left"]), ints(parts["right"]), ints(parts["n_train"]),
            ints(parts["n_est"]), ints(parts["leaf_of_node"]), ints(members),
            ints(leaf_ptr), ints(node_ptr),
            feature_names=tuple(str(v) for v in doc.get("feature_names", ())))
    except CorruptModelError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptModelError(f"malformed model document: {exc}") from exc
    _validate(model)
    return model


def _validate(model: ForestModel):
    if model.feature_names and len(model.feature_names) != model.n_features:
        raise CorruptModelError("feature name count does not match n_features")
    if len(model.responses) != model.n_rows:
        raise CorruptModelError("response count does not match n_rows")
    if model.leaf_members.size and (model.leaf_members.min() < 0
                                    or model.leaf_members.max() >= model.n_rows):
        raise CorruptModelError("leaf member index out of range")
    if np.any(np.diff(model.leaf_ptr) <= 0):
        raise CorruptModelError("leaf without estimation members")
    internal = model.feature >= 0
    if internal.any() and model.feature[internal].max() >= model.n_features:
        raise CorruptModelError("split feature out of range")


def save_model(model: ForestModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, separators=(",", ":"))
        fh.write("\n")


def load_model(path) -> ForestModel:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CorruptModelError(f"model file is not valid JSON: {exc}") from exc
    return model_from_dict(doc)
