"""Versioned JSON checkpoints for trained models.

Every parameter is stored as a named float64 array (base64 of little-endian
bytes) next to the class lists and relation schema the model was built
against, a snapshot of the run configuration, and training metadata.  The
writer emits canonical JSON (sorted keys, fixed separators), so loading a
checkpoint and saving it again reproduces the file byte for byte.
"""

from __future__ import annotations

import base64
import json

import numpy as np

from .autodiff import Tensor
from .gnn import HeteroGnnModel, SageModule
from .kg import Relation
from .predictor import FitnessModel, PairCombiner, PredictionHead

__all__ = [
    "CHECKPOINT_VERSION",
    "CheckpointError",
    "checkpoint_for_fitness",
    "checkpoint_for_gnn",
    "checkpoint_for_priors",
    "load_checkpoint",
    "model_from_checkpoint",
    "priors_from_checkpoint",
    "save_checkpoint",
]

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint (maps to exit code 3)."""


# -- array codec ---------------------------------------------------------------


def _encode_array(arr) -> dict:
    a = np.ascontiguousarray(np.asarray(arr, dtype=np.float64), dtype="<f8")
    return {
        "shape": list(a.shape),
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def _decode_array(obj, name: str) -> np.ndarray:
    if not isinstance(obj, dict) or "shape" not in obj or "data" not in obj:
        raise CheckpointError(f"parameter {name}: expected shape/data object")
    try:
        raw = base64.b64decode(obj["data"], validate=True)
    except (ValueError, TypeError):
        raise CheckpointError(f"parameter {name}: bad base64 payload") from None
    arr = np.frombuffer(raw, dtype="<f8")
    shape = tuple(obj["shape"])
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"parameter {name}: payload does not match shape {shape}")
    return arr.reshape(shape).astype(np.float64, copy=True)


def _tensor(obj, name: str) -> Tensor:
    return Tensor(_decode_array(obj, name), requires_grad=True)


# -- model payloads --------------------------------------------------------------


def _encode_gnn(model: HeteroGnnModel) -> dict:
    layers = []
    for lay in model.layers:
        mods = []
        for key in sorted(lay):
            m = lay[key]
            mods.append(
                {
                    "relation": list(m.relation.key),
                    "w_self": _encode_array(m.w_self.data),
                    "w_neigh": _encode_array(m.w_neigh.data),
                    "bias": _encode_array(m.bias.data),
                }
            )
        layers.append(mods)
    return {
        "classes": {d: list(cs) for d, cs in model.classes.items()},
        "priors": {d: _encode_array(t.data) for d, t in model.priors.items()},
        "layers": layers,
    }


def _decode_gnn(obj) -> HeteroGnnModel:
    classes = {d: tuple(cs) for d, cs in obj["classes"].items()}
    priors = {d: _tensor(enc, f"prior/{d}") for d, enc in obj["priors"].items()}
    layers = []
    for i, mods in enumerate(obj["layers"]):
        lay = {}
        for m in mods:
            rel = Relation(*m["relation"])
            lay[rel.key] = SageModule(
                rel,
                _tensor(m["w_self"], f"layer{i}/{rel.name}/w_self"),
                _tensor(m["w_neigh"], f"layer{i}/{rel.name}/w_neigh"),
                _tensor(m["bias"], f"layer{i}/{rel.name}/bias"),
            )
        layers.append(lay)
    return HeteroGnnModel(classes, priors, layers)


def _envelope(kind: str, payload: dict, config, metadata) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config if config is not None else {},
        "metadata": metadata if metadata is not None else {},
        **payload,
    }


def checkpoint_for_gnn(model: HeteroGnnModel, config=None, metadata=None) -> dict:
    return _envelope("joint", {"gnn": _encode_gnn(model)}, config, metadata)


def checkpoint_for_fitness(model: FitnessModel, config=None, metadata=None) -> dict:
    payload = {
        "gnn": _encode_gnn(model.gnn),
        "combiner": {
            "method": model.combiner.method,
            "temp": model.combiner.temp,
            "w": None if model.combiner.w is None else _encode_array(model.combiner.w.data),
        },
        "head": [
            {"w": _encode_array(w.data), "b": _encode_array(b.data)}
            for w, b in model.head.layers
        ],
        "gene_domain": model.gene_domain,
    }
    return _envelope("fitness", payload, config, metadata)


def checkpoint_for_priors(results, config=None, metadata=None) -> dict:
    """`results` is an iterable of per-domain prior training results."""
    payload = {
        "priors": {
            r.domain: {"classes": list(r.classes), "latents": _encode_array(r.latents)}
            for r in results
        }
    }
    return _envelope("priors", payload, config, metadata)


# -- reading ------------------------------------------------------------------------


def _check_envelope(env) -> dict:
    if not isinstance(env, dict):
        raise CheckpointError("checkpoint must be a JSON object")
    version = env.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version!r}, expected {CHECKPOINT_VERSION}"
        )
    if env.get("kind") not in ("priors", "joint", "fitness"):
        raise CheckpointError(f"unknown checkpoint kind {env.get('kind')!r}")
    return env


def model_from_checkpoint(env) -> HeteroGnnModel | FitnessModel:
    """Rebuild the stored model: a FitnessModel for 'fitness' checkpoints, a
    bare graph model for 'joint' ones."""
    env = _check_envelope(env)
    try:
        if env["kind"] == "joint":
            return _decode_gnn(env["gnn"])
        if env["kind"] == "fitness":
            gnn = _decode_gnn(env["gnn"])
            c = env["combiner"]
            w = None if c["w"] is None else _tensor(c["w"], "combiner/w")
            combiner = PairCombiner(c["method"], w, c["temp"])
            head = PredictionHead(
                [
                    (_tensor(h["w"], f"head/{i}/w"), _tensor(h["b"], f"head/{i}/b"))
                    for i, h in enumerate(env["head"])
                ]
            )
            return FitnessModel(gnn, combiner, head, env["gene_domain"])
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint: {e}") from None
    raise CheckpointError(f"checkpoint kind {env['kind']!r} holds no model")


def priors_from_checkpoint(env) -> dict:
    """domain -> (class name list, latent matrix [n_classes, dim_prior])."""
    env = _check_envelope(env)
    if env["kind"] != "priors":
        raise CheckpointError(f"expected a priors checkpoint, got {env['kind']!r}")
    out = {}
    try:
        for d, obj in env["priors"].items():
            out[d] = (list(obj["classes"]), _decode_array(obj["latents"], f"priors/{d}"))
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"malformed checkpoint: {e}") from None
    return out


# -- files ---------------------------------------------------------------------------


def dumps_checkpoint(env: dict) -> str:
    """Canonical serialization; stable across save/load/save round trips."""
    _check_envelope(env)
    return json.dumps(env, sort_keys=True, separators=(",", ":")) + "\n"


def save_checkpoint(path, env: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_checkpoint(env))


def load_checkpoint(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from None
    try:
        env = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint is not valid JSON: {e}") from None
    return _check_envelope(env)
