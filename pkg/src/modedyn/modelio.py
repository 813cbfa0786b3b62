"""JSON serialization for fitted models.

One file per model. Every variant carries the library (dimension, degree,
multi-index list) plus its parameters; loading rebuilds an object that
predicts bit-identically to the saved one. Floats rely on the JSON
encoder's shortest round-trip decimal form.
"""

import json

import numpy as np

from .gated import EnsembleModel, GatingNetwork, GlobalConfig, GlobalModel
from .library import PolyLibrary
from .local import EmConfig, LocalModel


def _np_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)!r}")


def _config_dict(cfg) -> dict:
    out = {}
    for k in cfg.__dataclass_fields__:
        v = getattr(cfg, k)
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def _gate_dict(gate: GatingNetwork) -> dict:
    return {
        "mu": gate.input_mean.tolist(),
        "scale": gate.input_scale.tolist(),
        "activation": gate.activation,
        "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in gate.layers],
    }


def _gate_from_dict(d: dict) -> GatingNetwork:
    return GatingNetwork(
        input_mean=np.asarray(d["mu"], dtype=float),
        input_scale=np.asarray(d["scale"], dtype=float),
        layers=[
            (np.asarray(lay["w"], dtype=float), np.asarray(lay["b"], dtype=float))
            for lay in d["layers"]
        ],
        activation=d["activation"],
    )


def _library_header(lib: PolyLibrary, K: int) -> dict:
    return {
        "d": lib.dim,
        "K": K,
        "degree": lib.degree,
        "terms": [list(t) for t in lib.terms],
    }


def _library_from_dict(d: dict) -> PolyLibrary:
    return PolyLibrary(
        dim=int(d["d"]),
        degree=int(d["degree"]),
        terms=tuple(tuple(int(e) for e in t) for t in d["terms"]),
    )


def model_to_dict(model) -> dict:
    """Plain-dict form of any fitted model, keyed by ``variant``."""
    if isinstance(model, LocalModel):
        doc = {"variant": "local"}
        doc.update(_library_header(model.library, model.n_experts))
        doc["experts"] = [
            {"theta": model.thetas[k].tolist(), "sigma": float(model.sigmas[k])}
            for k in range(model.n_experts)
        ]
        doc["pi"] = model.mixing.tolist()
        doc["config"] = _config_dict(model.config)
        doc["train_log"] = model.train_log
        return doc
    if isinstance(model, GlobalModel):
        doc = {"variant": "global"}
        doc.update(_library_header(model.library, model.n_experts))
        doc["experts"] = [
            {"theta": model.thetas[k].tolist(),
             "log_sigma": float(model.log_sigmas[k])}
            for k in range(model.n_experts)
        ]
        doc["gate"] = _gate_dict(model.gate)
        doc["config"] = _config_dict(model.config)
        doc["train_log"] = model.train_log
        return doc
    if isinstance(model, EnsembleModel):
        doc = {"variant": "ensemble"}
        doc.update(_library_header(model.library, model.n_experts))
        doc["experts"] = [
            {"theta": model.thetas[k].tolist(),
             "log_sigma": float(model.log_sigmas[k])}
            for k in range(model.n_experts)
        ]
        doc["gates"] = [_gate_dict(g) for g in model.gates]
        doc["config"] = _config_dict(model.config)
        doc["member_seeds"] = [int(s) for s in model.member_seeds]
        return doc
    raise TypeError(f"unknown model type {type(model)!r}")


def model_from_dict(doc: dict):
    variant = doc.get("variant")
    lib = _library_from_dict(doc)
    K = int(doc["K"])
    if len(doc["experts"]) != K:
        raise ValueError("expert count does not match K")
    thetas = np.asarray([e["theta"] for e in doc["experts"]], dtype=float)
    if thetas.shape != (K, lib.n_terms, lib.dim):
        raise ValueError(
            f"theta shape {thetas.shape} does not match library "
            f"({K}, {lib.n_terms}, {lib.dim})"
        )
    if variant == "local":
        cfg = EmConfig(**doc["config"])
        return LocalModel(
            library=lib,
            thetas=thetas,
            sigmas=np.asarray([e["sigma"] for e in doc["experts"]], dtype=float),
            mixing=np.asarray(doc["pi"], dtype=float),
            config=cfg,
            train_log=doc.get("train_log", []),
        )
    if variant in ("global", "ensemble"):
        raw = dict(doc["config"])
        raw["gate_hidden"] = tuple(raw.get("gate_hidden", ()))
        cfg = GlobalConfig(**raw)
        log_sigmas = np.asarray(
            [e["log_sigma"] for e in doc["experts"]], dtype=float
        )
        if variant == "global":
            return GlobalModel(
                library=lib,
                thetas=thetas,
                log_sigmas=log_sigmas,
                gate=_gate_from_dict(doc["gate"]),
                config=cfg,
                train_log=doc.get("train_log", []),
            )
        return EnsembleModel(
            library=lib,
            thetas=thetas,
            log_sigmas=log_sigmas,
            gates=[_gate_from_dict(g) for g in doc["gates"]],
            config=cfg,
            member_seeds=[int(s) for s in doc.get("member_seeds", [])],
        )
    raise ValueError(f"unknown model variant {variant!r}")


def save_model(model, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=2, default=_np_default)
        fh.write("\n")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
