"""Matrix I/O, preprocessing, run configuration and fitted-model bundles.

Matrices travel as plain 2-D ``float64`` arrays. Two on-disk encodings are
supported:

* CSV: comma separated, no header, LF line endings, every value written with
  17 significant digits so a save/load cycle is bit-exact;
* binary: the 6-byte magic ``b"OAMP1\\0"``, little-endian ``u64`` rows and cols,
  then the row-major ``float64`` payload.
"""
from __future__ import annotations

import json
import os
import re
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from ._linalg import is_symmetric
from .errors import (
    ArgError,
    ConfigError,
    DomainError,
    EmptyInput,
    ParseError,
    SchemaError,
    VersionError,
)
from .priors import prior_from_dict, prior_to_dict

MAGIC = b"OAMP1\0"
FORMAT_VERSION = "1"
PREPROCESS_STEPS = ("log1p", "center", "scale-to-unit-noise")
_ID_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")


# ---------------------------------------------------------------------------
# Matrices


def _check_matrix(X):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise ArgError(f"expected a nonempty 2-D matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ArgError("matrix contains non-finite entries")
    return X


def load_matrix(path):
    """Read a CSV or binary matrix; the encoding is detected from the magic bytes."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw.startswith(MAGIC):
        return _decode_binary(raw, path)
    return _parse_csv(raw, path)


def _decode_binary(raw, path):
    head = len(MAGIC) + 16
    if len(raw) < head:
        raise ParseError(f"{path}: truncated binary header")
    rows, cols = struct.unpack("<QQ", raw[len(MAGIC):head])
    if rows < 1 or cols < 1:
        raise EmptyInput(f"{path}: empty matrix")
    if len(raw) != head + 8 * rows * cols:
        raise ParseError(f"{path}: payload size does not match {rows}x{cols}")
    X = np.frombuffer(raw, dtype="<f8", offset=head).reshape(rows, cols).astype(float)
    if not np.all(np.isfinite(X)):
        raise ParseError(f"{path}: non-finite entry")
    return X


def _parse_csv(raw, path):
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not UTF-8 text") from exc
    lines = text.replace("\r\n", "\n").split("\n")
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise EmptyInput(f"{path}: empty file")
    width = lines[0].count(",")
    for i, line in enumerate(lines, start=1):
        if line.count(",") != width or not line.strip():
            raise ParseError(f"ragged row {i}")
    try:
        X = np.loadtxt(lines, delimiter=",", dtype=float, ndmin=2)
    except ValueError as exc:
        raise ParseError(f"{path}: non-numeric token ({exc})") from exc
    if not np.all(np.isfinite(X)):
        raise ParseError(f"{path}: non-finite entry")
    return X


def save_matrix(path, X, binary=None):
    """Write ``X`` as CSV, or as binary when ``binary`` is set or the path ends in ``.bin``."""
    X = _check_matrix(X)
    if binary is None:
        binary = str(path).endswith(".bin")
    if binary:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<QQ", *X.shape))
            fh.write(np.ascontiguousarray(X, dtype="<f8").tobytes())
    else:
        with open(path, "w", newline="\n") as fh:
            np.savetxt(fh, X, fmt="%.17g", delimiter=",")


def preprocess(X, steps, rank=None):
    """Apply preprocessing ``steps`` in order.

    ``scale-to-unit-noise`` divides by the residual noise level
    ``||X - X_r||_F / sqrt(N p)`` and needs an integer ``rank``.
    """
    X = np.array(X, dtype=float)
    for step in steps:
        if step == "log1p":
            if np.any(X < 0):
                raise DomainError("log1p needs nonnegative entries")
            X = np.log1p(X)
        elif step == "center":
            X = X - X.mean(axis=0)
        elif step == "scale-to-unit-noise":
            if not isinstance(rank, (int, np.integer)) or rank < 0:
                raise ArgError("scale-to-unit-noise needs an explicit integer rank")
            s = np.linalg.svd(X, compute_uv=False)
            resid = np.sqrt(np.sum(s[rank:] ** 2))
            sigma = resid / np.sqrt(X.size)
            if sigma <= 0:
                raise DomainError("residual noise level is zero")
            X = X / sigma
        else:
            raise ArgError(f"unknown preprocessing step {step!r}")
    return X


# ---------------------------------------------------------------------------
# Dataset


@dataclass
class MultimodalDataset:
    """Rescaled high-dim matrices ``X / sqrt(N)`` and raw low-dim matrices."""

    high: "OrderedDict[str, np.ndarray]"
    low: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def __post_init__(self):
        self.high = OrderedDict((k, _check_matrix(v)) for k, v in self.high.items())
        self.low = OrderedDict((k, _check_matrix(np.asarray(v, dtype=float).reshape(len(v), -1)))
                               for k, v in self.low.items())
        if not self.high:
            raise ArgError("at least one high-dimensional modality is required")
        rows = {X.shape[0] for X in self.high.values()} | {X.shape[0] for X in self.low.values()}
        if len(rows) != 1:
            raise ArgError(f"modalities disagree on the number of subjects: {sorted(rows)}")
        dup = set(self.high) & set(self.low)
        if dup:
            raise ArgError(f"duplicate modality ids {sorted(dup)}")

    @classmethod
    def from_raw(cls, high, low=None):
        """Build from unscaled high-dim matrices ``X_h`` (divided by ``sqrt(N)`` here)."""
        high = OrderedDict(high)
        N = next(iter(high.values())).shape[0]
        return cls(OrderedDict((k, np.asarray(v, float) / np.sqrt(N)) for k, v in high.items()),
                   OrderedDict(low or {}))

    @property
    def N(self):
        return next(iter(self.high.values())).shape[0]

    def gamma(self, h):
        return self.high[h].shape[1] / self.N


# ---------------------------------------------------------------------------
# Run configuration


@dataclass
class ModalitySpec:
    id: str
    kind: str
    path: str
    rank: object = None  # int, "auto" or None for low-dim modalities
    preprocess: list = field(default_factory=list)


@dataclass
class RunConfig:
    modalities: list
    iterations: int
    gmm_components: object = "auto"
    seed: int = 0
    alpha: float = 0.1
    mc_samples: int = 100_000
    prior_class: str = "gmm"
    rank_tol: float = 0.02

    def components_for(self, which):
        g = self.gmm_components
        if isinstance(g, dict):
            return g.get(which, "auto")
        return g


def _config_error(msg):
    raise ConfigError(msg)


def _check_components(v, where):
    if v == "auto":
        return
    if isinstance(v, bool) or not isinstance(v, int) or v < 1:
        _config_error(f"{where} must be 'auto' or a positive integer")


def validate_config(cfg):
    if not isinstance(cfg.iterations, int) or isinstance(cfg.iterations, bool) or cfg.iterations < 0:
        _config_error("iterations must be a nonnegative integer")
    if not isinstance(cfg.mc_samples, int) or cfg.mc_samples < 1000:
        _config_error("mc_samples must be an integer >= 1000")
    if not (isinstance(cfg.alpha, (int, float)) and 0 < cfg.alpha < 1):
        _config_error("alpha must lie in (0, 1)")
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool) or not 0 <= cfg.seed < 2**64:
        _config_error("seed must be a 64-bit unsigned integer")
    if cfg.prior_class not in ("gmm", "npmle"):
        _config_error("prior_class must be 'gmm' or 'npmle'")
    g = cfg.gmm_components
    if isinstance(g, dict):
        extra = set(g) - {"mu", "nu"}
        if extra:
            _config_error(f"unknown gmm_components keys {sorted(extra)}")
        for k, v in g.items():
            _check_components(v, f"gmm_components.{k}")
    else:
        _check_components(g, "gmm_components")
    kinds = [m.kind for m in cfg.modalities]
    n_high = kinds.count("high")
    if n_high < 1 or len(kinds) < 2:
        _config_error("need at least two modalities, one of them high-dimensional")
    ids = [m.id for m in cfg.modalities]
    if len(set(ids)) != len(ids):
        _config_error("modality ids must be unique")
    for m in cfg.modalities:
        if not isinstance(m.id, str) or not _ID_RE.match(m.id):
            _config_error(f"invalid modality id {m.id!r}")
        if m.kind not in ("high", "low"):
            _config_error(f"modality {m.id}: kind must be 'high' or 'low'")
        if m.kind == "low" and m.rank is not None:
            _config_error(f"modality {m.id}: low-dimensional modalities take no rank")
        if m.kind == "high":
            if m.rank != "auto" and (isinstance(m.rank, bool) or not isinstance(m.rank, int) or m.rank < 1):
                _config_error(f"modality {m.id}: rank must be 'auto' or a positive integer")
        for step in m.preprocess:
            if step not in PREPROCESS_STEPS:
                _config_error(f"modality {m.id}: unknown preprocessing step {step!r}")
        if "scale-to-unit-noise" in m.preprocess and not isinstance(m.rank, int):
            _config_error(f"modality {m.id}: scale-to-unit-noise needs an explicit rank")
    return cfg


def load_config(path):
    """Parse and validate a run configuration; data paths resolve relative to the file."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(doc, base_dir=os.path.dirname(os.path.abspath(path)))


def config_from_dict(doc, base_dir="."):
    if not isinstance(doc, dict):
        _config_error("config must be a JSON object")
    for key in ("modalities", "iterations"):
        if key not in doc:
            _config_error(f"missing config key {key!r}")
    known = {"modalities", "iterations", "gmm_components", "seed", "alpha", "mc_samples",
             "prior_class", "rank_tol"}
    extra = set(doc) - known
    if extra:
        _config_error(f"unknown config keys {sorted(extra)}")
    mods = []
    for m in doc["modalities"]:
        if not isinstance(m, dict) or not {"id", "kind", "path"} <= set(m):
            _config_error("each modality needs 'id', 'kind' and 'path'")
        p = m["path"]
        if not os.path.isabs(p):
            p = os.path.join(base_dir, p)
        rank = m.get("rank", "auto" if m["kind"] == "high" else None)
        mods.append(ModalitySpec(m["id"], m["kind"], p, rank, list(m.get("preprocess", []))))
    cfg = RunConfig(
        modalities=mods,
        iterations=doc["iterations"],
        gmm_components=doc.get("gmm_components", "auto"),
        seed=doc.get("seed", 0),
        alpha=doc.get("alpha", 0.1),
        mc_samples=doc.get("mc_samples", 100_000),
        prior_class=doc.get("prior_class", "gmm"),
        rank_tol=doc.get("rank_tol", 0.02),
    )
    return validate_config(cfg)


def load_dataset(cfg):
    """Load and preprocess every modality listed in ``cfg``.

    Returns the dataset and a preprocessing record for the model bundle.
    """
    high, low, record = OrderedDict(), OrderedDict(), OrderedDict()
    for m in cfg.modalities:
        X = load_matrix(m.path)
        X = preprocess(X, m.preprocess, rank=m.rank if isinstance(m.rank, int) else None)
        record[m.id] = list(m.preprocess)
        if m.kind == "high":
            high[m.id] = X
        else:
            low[m.id] = X
    try:
        return MultimodalDataset.from_raw(high, low), record
    except ArgError as exc:
        raise SchemaError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Model bundle


@dataclass
class HighModel:
    rank: int
    p: int
    gamma: float
    D_hat: np.ndarray
    Vbar: np.ndarray
    Sigma_L: np.ndarray
    S_L: np.ndarray
    nu: object


@dataclass
class LowModel:
    rank: int
    L_hat: np.ndarray


@dataclass
class ModelBundle:
    """Everything needed to serve queries after a fit."""

    N: int
    iterations: int
    high: "OrderedDict[str, HighModel]"
    low: "OrderedDict[str, LowModel]"
    mu: object
    preprocessing: dict = field(default_factory=dict)
    format_version: str = FORMAT_VERSION

    @property
    def latent_dim(self):
        return sum(m.rank for m in self.high.values()) + sum(m.rank for m in self.low.values())

    def coords(self):
        """Map each modality id to its slice of the joint latent vector."""
        out, start = OrderedDict(), 0
        for k, m in list(self.high.items()) + list(self.low.items()):
            out[k] = slice(start, start + m.rank)
            start += m.rank
        return out

    def validate(self):
        for h, m in self.high.items():
            r = m.rank
            if np.shape(m.D_hat) != (r,) or np.shape(m.Vbar) != (m.p, r):
                raise SchemaError(f"modality {h}: D_hat/Vbar shapes disagree with rank {r}")
            if np.shape(m.Sigma_L) != (r, r) or np.shape(m.S_L) != (r, r):
                raise SchemaError(f"modality {h}: Sigma_L/S_L must be {r}x{r}")
            if not is_symmetric(m.Sigma_L):
                raise SchemaError(f"modality {h}: Sigma_L is not symmetric")
            if np.linalg.eigvalsh(0.5 * (m.Sigma_L + m.Sigma_L.T))[0] <= 0:
                raise SchemaError(f"modality {h}: Sigma_L is not positive definite")
            if m.nu.dim != r:
                raise SchemaError(f"modality {h}: prior dimension {m.nu.dim} != rank {r}")
        for l, m in self.low.items():
            if np.shape(m.L_hat) != (m.rank, m.rank):
                raise SchemaError(f"modality {l}: L_hat must be {m.rank}x{m.rank}")
        if self.mu.dim != self.latent_dim:
            raise SchemaError(f"joint prior dimension {self.mu.dim} != total rank {self.latent_dim}")


def _bundle_paths(path):
    path = str(path)
    if path.endswith(".json"):
        return path, os.path.dirname(os.path.abspath(path))
    return os.path.join(path, "bundle.json"), path


def save_model(bundle, path):
    """Write ``bundle.json`` plus one binary ``Vbar`` sibling per high-dim modality."""
    bundle.validate()
    json_path, root = _bundle_paths(path)
    os.makedirs(root, exist_ok=True)
    high = []
    for h, m in bundle.high.items():
        rel = f"bundle_Vbar_{h}.bin"
        save_matrix(os.path.join(root, rel), m.Vbar, binary=True)
        high.append({
            "id": h, "rank": m.rank, "p": m.p, "gamma": m.gamma,
            "D_hat": np.asarray(m.D_hat).tolist(),
            "Sigma_L": np.asarray(m.Sigma_L).tolist(),
            "S_L": np.asarray(m.S_L).tolist(),
            "nu": prior_to_dict(m.nu),
            "Vbar": {"path": rel, "shape": list(m.Vbar.shape)},
        })
    doc = {
        "format_version": bundle.format_version,
        "N": bundle.N,
        "iterations": bundle.iterations,
        "preprocessing": bundle.preprocessing,
        "high": high,
        "low": [{"id": l, "rank": m.rank, "L_hat": np.asarray(m.L_hat).tolist()}
                for l, m in bundle.low.items()],
        "mu": prior_to_dict(bundle.mu),
    }
    with open(json_path, "w", newline="\n") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    return json_path


def load_model(path):
    json_path, root = _bundle_paths(path)
    try:
        with open(json_path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{json_path}: invalid JSON") from exc
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise SchemaError("missing field 'format_version'")
    if doc["format_version"] != FORMAT_VERSION:
        raise VersionError(f"unsupported bundle format version {doc['format_version']!r}")
    try:
        high = OrderedDict()
        for e in doc["high"]:
            r = int(e["rank"])
            Vbar = load_matrix(os.path.join(root, e["Vbar"]["path"]))
            if list(Vbar.shape) != list(e["Vbar"]["shape"]):
                raise SchemaError(f"modality {e['id']}: Vbar shape mismatch")
            high[e["id"]] = HighModel(
                rank=r, p=int(e["p"]), gamma=float(e["gamma"]),
                D_hat=np.asarray(e["D_hat"], dtype=float).reshape(-1),
                Vbar=Vbar,
                Sigma_L=np.asarray(e["Sigma_L"], dtype=float).reshape(r, r),
                S_L=np.asarray(e["S_L"], dtype=float).reshape(r, r),
                nu=prior_from_dict(e["nu"]),
            )
        low = OrderedDict()
        for e in doc["low"]:
            r = int(e["rank"])
            low[e["id"]] = LowModel(r, np.asarray(e["L_hat"], dtype=float).reshape(r, r))
        bundle = ModelBundle(
            N=int(doc["N"]), iterations=int(doc["iterations"]), high=high, low=low,
            mu=prior_from_dict(doc["mu"]), preprocessing=doc.get("preprocessing", {}),
            format_version=doc["format_version"],
        )
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"missing or malformed field: {exc}") from exc
    except ValueError as exc:
        raise SchemaError(f"dimension mismatch: {exc}") from exc
    bundle.validate()
    return bundle
