"""Versioned JSON archive for trained models and their mixture sampler.

Arrays are stored as shape plus a space-separated decimal string with 17
significant digits per entry, which reconstructs every float64 bit-exactly.
A format_version gate refuses archives written by an incompatible layout.
"""

from __future__ import annotations

import json
import os
import tempfile
from typing import Sequence

import numpy as np

from .gmm import GMMModel
from .model import ELBOBreakdown, FNODEModel
from .nets import MLP, Hypernetwork, MLPSpec
from .odeint import SolverConfig
from .syndata import fmt_float
from .tensorgrad import ParamSet, Tensor

__all__ = [
    "FORMAT_VERSION",
    "ArchiveError",
    "save_archive",
    "load_archive",
    "write_text_atomic",
]

FORMAT_VERSION = 1


class ArchiveError(ValueError):
    """Unreadable or version-incompatible model archive."""


def write_text_atomic(path, text: str) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode_array(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    return {
        "shape": list(arr.shape),
        "data": " ".join(fmt_float(x) for x in arr.reshape(-1)),
    }


def _decode_array(obj: dict) -> np.ndarray:
    flat = np.array([float(tok) for tok in obj["data"].split()], dtype=np.float64)
    return flat.reshape(obj["shape"])


def _encode_spec(spec: MLPSpec) -> dict:
    return {"widths": list(spec.layer_widths), "final_activation": spec.final_activation}


def _decode_spec(obj: dict) -> MLPSpec:
    return MLPSpec(tuple(obj["widths"]), final_activation=obj["final_activation"])


def _encode_gmm(S: GMMModel | None) -> dict | None:
    if S is None:
        return None
    return {
        "cov_type": S.cov_type,
        "weights": _encode_array(S.weights),
        "means": _encode_array(S.means),
        "covariances": _encode_array(S.covariances),
    }


def _decode_gmm(obj: dict | None) -> GMMModel | None:
    if obj is None:
        return None
    return GMMModel(
        weights=_decode_array(obj["weights"]),
        means=_decode_array(obj["means"]),
        covariances=_decode_array(obj["covariances"]),
        cov_type=obj["cov_type"],
    )


def _history_summary(history: Sequence[ELBOBreakdown] | None) -> dict | None:
    if not history:
        return None

    def rec(bd: ELBOBreakdown) -> dict:
        return {
            "total": bd.total,
            "recon_loglik": bd.recon_loglik,
            "kl_z0": bd.kl_z0,
            "kl_gamma": bd.kl_gamma,
            "kl_weight": bd.kl_weight,
        }

    return {"epochs": len(history), "first": rec(history[0]), "last": rec(history[-1])}


def save_archive(
    path,
    m: FNODEModel,
    S: GMMModel | None = None,
    history: Sequence[ELBOBreakdown] | None = None,
    seeds: dict | None = None,
) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "model": {
            "obs_dim": m.obs_dim,
            "n_points": m.n_points,
            "p": m.p,
            "d_gamma": m.d_gamma,
            "sigma_x": fmt_float(m.sigma_x),
            "obs_scale": fmt_float(m.obs_scale),
            "solver": {"method": m.solver.method, "step_size": fmt_float(m.solver.step_size)},
            "specs": {
                "enc_z0": _encode_spec(m.enc_z0.spec),
                "enc_gamma": _encode_spec(m.enc_gamma.spec),
                "hyper_body": _encode_spec(m.hyper.body),
                "f": _encode_spec(m.f_spec),
                "dec": _encode_spec(m.dec.spec),
            },
            "params": {name: _encode_array(t.data) for name, t in m.params.items()},
        },
        "gmm": _encode_gmm(S),
        "history": _history_summary(history),
        "seeds": seeds or {},
    }
    write_text_atomic(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _mlp_params_from(spec: MLPSpec, raw: dict, prefix: str) -> ParamSet:
    # rebuild in canonical layer order; files store keys sorted alphabetically
    ps = ParamSet()
    try:
        for i in range(spec.n_layers):
            ps.add(f"w{i}", Tensor(_decode_array(raw[prefix + f"w{i}"])))
            ps.add(f"b{i}", Tensor(_decode_array(raw[prefix + f"b{i}"])))
    except KeyError as e:
        raise ArchiveError(f"archive is missing parameter {e}") from e
    return ps


def load_archive(path):
    """Rebuild (model, gmm_or_None, seeds) from a saved archive."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ArchiveError(f"{path}: unreadable archive ({e})") from e
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ArchiveError(
            f"{path}: format_version {version!r} is not supported (expected {FORMAT_VERSION})"
        )
    md = doc["model"]
    specs = md["specs"]
    raw_params = md["params"]

    enc_z0_spec = _decode_spec(specs["enc_z0"])
    enc_gamma_spec = _decode_spec(specs["enc_gamma"])
    hyper_spec = _decode_spec(specs["hyper_body"])
    dec_spec = _decode_spec(specs["dec"])

    enc_z0 = MLP(enc_z0_spec, _mlp_params_from(enc_z0_spec, raw_params, "enc_z0."))
    enc_gamma = MLP(enc_gamma_spec, _mlp_params_from(enc_gamma_spec, raw_params, "enc_gamma."))
    hyper_params = _mlp_params_from(hyper_spec, raw_params, "hyper.")
    try:
        hyper_params.add("lambda", Tensor(_decode_array(raw_params["hyper.lambda"])))
    except KeyError as e:
        raise ArchiveError(f"archive is missing parameter {e}") from e
    hyper = Hypernetwork(hyper_spec, hyper_params)
    dec = MLP(dec_spec, _mlp_params_from(dec_spec, raw_params, "dec."))

    params = ParamSet()
    for prefix, ps in (
        ("enc_z0.", enc_z0.params),
        ("enc_gamma.", enc_gamma.params),
        ("hyper.", hyper.params),
        ("dec.", dec.params),
    ):
        for name, t in ps.items():
            params.add(prefix + name, t)

    m = FNODEModel(
        enc_z0=enc_z0,
        enc_gamma=enc_gamma,
        hyper=hyper,
        f_spec=_decode_spec(specs["f"]),
        dec=dec,
        solver=SolverConfig(
            method=md["solver"]["method"], step_size=float(md["solver"]["step_size"])
        ),
        sigma_x=float(md["sigma_x"]),
        p=int(md["p"]),
        d_gamma=int(md["d_gamma"]),
        obs_dim=int(md["obs_dim"]),
        n_points=int(md["n_points"]),
        obs_scale=float(md["obs_scale"]),
        params=params,
    )
    return m, _decode_gmm(doc.get("gmm")), doc.get("seeds", {})
