"""Adapted PointNet: un-ordered feature vectors in, per-point displacements out.

Layout (every hidden layer is linear -> batch-norm -> ReLU)::

    x (B,S,d) -> T1-net (d x d) -> shared MLP 64,64 -> T2-net (64 x 64)
      -> local features (64) -> shared MLP 64,128,gfv -> max over points
      -> [local | global] -> shared MLP 512,256,128 (+ dropout) -> linear 3

Inputs are standardised with stored per-component statistics and outputs
rescaled by a stored displacement scale; both live in the parameters.
"""
from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensorcore as tc

STANDARD_GFV = (256, 512, 1024, 2048)


class CompatibilityError(ValueError):
    """Checkpoint or feature mode does not match what a network expects."""


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int = 9
    gfv_size: int = 1024
    dropout_rate: float = 0.25
    t2_dim: int = 64
    mlp1: tuple = (64, 64)
    mlp2: tuple = (64, 128)
    head: tuple = (512, 256, 128)
    tnet_mlp: tuple = (64, 128, 1024)
    tnet_fc: tuple = (512, 256)
    feature_transform: bool = True
    orthogonality_weight: float = 0.0
    zero_head: bool = True

    def __post_init__(self):
        if self.input_dim not in (7, 9):
            raise ValueError(f"input_dim must be 7 or 9, got {self.input_dim}")
        if self.mlp1[-1] != self.t2_dim:
            raise ValueError("last mlp1 width must equal t2_dim")
        for name in ("mlp1", "mlp2", "head", "tnet_mlp", "tnet_fc"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))

    @property
    def t1_dim(self) -> int:
        return self.input_dim

    @property
    def feature_mode(self) -> str:
        return "pbk" if self.input_dim == 9 else "pb"

    @property
    def nonstandard_gfv(self) -> bool:
        return self.gfv_size not in STANDARD_GFV

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


@dataclass
class NetworkParameters:
    """Trainable tensors, batch-norm running statistics and input normalisation."""

    config: NetworkConfig
    weights: dict = field(default_factory=dict)       # name -> tc.Tensor
    bn: dict = field(default_factory=dict)            # name -> tc.BatchNormState
    input_mean: Optional[np.ndarray] = None
    input_std: Optional[np.ndarray] = None
    target_scale: float = 1.0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        d = self.config.input_dim
        if self.input_mean is None:
            self.input_mean = np.zeros(d)
        if self.input_std is None:
            self.input_std = np.ones(d)

    @property
    def feature_mode(self) -> str:
        return self.config.feature_mode

    def trainable(self) -> list:
        return list(self.weights.values())

    def arrays(self) -> dict:
        """Every stored array by name, including normalisation statistics."""
        out = {name: t.data for name, t in self.weights.items()}
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        out["norm.input_mean"] = self.input_mean
        out["norm.input_std"] = self.input_std
        out["norm.target_scale"] = np.array([self.target_scale])
        return out

    def copy(self) -> "NetworkParameters":
        new = init_network(self.config, seed=self.seed)
        new.load_arrays({k: v.copy() for k, v in self.arrays().items()})
        return new

    def load_arrays(self, arrays: dict) -> None:
        expected = {k: v.shape for k, v in self.arrays().items()}
        found = {k: np.shape(v) for k, v in arrays.items()}
        if expected != found:
            diff = [f"{k}: expected {expected.get(k)}, found {found.get(k)}"
                    for k in sorted(set(expected) | set(found)) if expected.get(k) != found.get(k)]
            raise CompatibilityError("parameter shape mismatch:\n  " + "\n  ".join(diff[:20]))
        for name, t in self.weights.items():
            t.data = np.array(arrays[name], dtype=np.float64)
        for name, st in self.bn.items():
            st.running_mean = np.array(arrays[f"{name}.running_mean"], dtype=np.float64)
            st.running_var = np.array(arrays[f"{name}.running_var"], dtype=np.float64)
        self.input_mean = np.array(arrays["norm.input_mean"], dtype=np.float64)
        self.input_std = np.array(arrays["norm.input_std"], dtype=np.float64)
        self.target_scale = float(arrays["norm.target_scale"][0])


def _dense(params: NetworkParameters, rng, name: str, n_in: int, n_out: int,
           zero: bool = False, bn: bool = True) -> None:
    if zero:
        w = np.zeros((n_in, n_out))
    else:
        w = rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
    params.weights[f"{name}.w"] = tc.parameter(w, f"{name}.w")
    params.weights[f"{name}.b"] = tc.parameter(np.zeros(n_out), f"{name}.b")
    if bn:
        params.weights[f"{name}.gamma"] = tc.parameter(np.ones(n_out), f"{name}.gamma")
        params.weights[f"{name}.beta"] = tc.parameter(np.zeros(n_out), f"{name}.beta")
        params.bn[name] = tc.BatchNormState(n_out)


def _init_tnet(params, rng, prefix: str, dim: int, cfg: NetworkConfig) -> None:
    n_in = dim
    for i, width in enumerate(cfg.tnet_mlp):
        _dense(params, rng, f"{prefix}.conv{i}", n_in, width)
        n_in = width
    for i, width in enumerate(cfg.tnet_fc):
        _dense(params, rng, f"{prefix}.fc{i}", n_in, width)
        n_in = width
    _dense(params, rng, f"{prefix}.out", n_in, dim * dim, zero=True, bn=False)


def init_network(config: NetworkConfig, seed: int = 0) -> NetworkParameters:
    rng = np.random.default_rng(seed)
    params = NetworkParameters(config, seed=seed)
    _init_tnet(params, rng, "t1", config.input_dim, config)
    n_in = config.input_dim
    for i, width in enumerate(config.mlp1):
        _dense(params, rng, f"mlp1.{i}", n_in, width)
        n_in = width
    if config.feature_transform:
        _init_tnet(params, rng, "t2", config.t2_dim, config)
    for i, width in enumerate(config.mlp2 + (config.gfv_size,)):
        _dense(params, rng, f"mlp2.{i}", n_in, width)
        n_in = width
    n_in = config.t2_dim + config.gfv_size
    for i, width in enumerate(config.head):
        _dense(params, rng, f"head.{i}", n_in, width)
        n_in = width
    _dense(params, rng, "out", n_in, 3, zero=config.zero_head, bn=False)
    return params


def _layer(params, name, x, train, activation=True):
    w = params.weights
    h = tc.add(tc.matmul(x, w[f"{name}.w"]), w[f"{name}.b"])
    if name in params.bn:
        h = tc.batch_norm(h, w[f"{name}.gamma"], w[f"{name}.beta"], params.bn[name], train)
    return tc.relu(h) if activation else h


def t_net(params: NetworkParameters, x: tc.Tensor, prefix: str, dim: int, train: bool) -> tc.Tensor:
    """Mini point network producing a ``(B, dim, dim)`` transform (identity + learned)."""
    cfg = params.config
    h = x
    for i in range(len(cfg.tnet_mlp)):
        h = _layer(params, f"{prefix}.conv{i}", h, train)
    h = tc.max_over_points(h)
    for i in range(len(cfg.tnet_fc)):
        h = _layer(params, f"{prefix}.fc{i}", h, train)
    h = _layer(params, f"{prefix}.out", h, train, activation=False)
    B = x.shape[0]
    return tc.add(tc.reshape(h, (B, dim, dim)), np.eye(dim))


def normalise_inputs(params: NetworkParameters, features: np.ndarray) -> np.ndarray:
    return (features - params.input_mean) / params.input_std


def forward(params: NetworkParameters, features, train: bool = False,
            rng: Optional[np.random.Generator] = None, return_transforms: bool = False):
    """Per-point displacement prediction.

    ``features`` is ``(S, d)`` or ``(B, S, d)``; the result has the same
    leading shape with 3 output components.  ``train`` selects batch-norm
    batch statistics and enables dropout (``rng`` required).
    """
    cfg = params.config
    x = np.asarray(features, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != cfg.input_dim:
        raise CompatibilityError(
            f"expected features (..., S, {cfg.input_dim}) for mode {cfg.feature_mode}, "
            f"got {np.shape(features)}")
    B, S, _ = x.shape
    if train and S < 2:
        raise ValueError("train mode needs at least 2 points per set")
    if train and cfg.dropout_rate > 0 and rng is None:
        raise ValueError("train mode needs an rng for dropout")
    xt = tc.Tensor(normalise_inputs(params, x))
    transforms = []

    T1 = t_net(params, xt, "t1", cfg.input_dim, train)
    transforms.append(T1)
    h = tc.matmul(xt, T1)
    for i in range(len(cfg.mlp1)):
        h = _layer(params, f"mlp1.{i}", h, train)
    if cfg.feature_transform:
        T2 = t_net(params, h, "t2", cfg.t2_dim, train)
        transforms.append(T2)
        h = tc.matmul(h, T2)
    local = h
    for i in range(len(cfg.mlp2) + 1):
        h = _layer(params, f"mlp2.{i}", h, train)
    glob = tc.max_over_points(h)
    h = tc.concat([local, tc.expand_points(glob, S)], axis=-1)
    for i in range(len(cfg.head)):
        h = _layer(params, f"head.{i}", h, train)
    h = tc.dropout(h, cfg.dropout_rate, rng, train)
    out = _layer(params, "out", h, train, activation=False)
    out = tc.mul(out, params.target_scale)
    if squeeze:
        out = tc.reshape(out, (S, 3))
    if return_transforms:
        return out, transforms
    return out


def orthogonality_penalty(T: tc.Tensor) -> tc.Tensor:
    """Mean over the batch of ``||T T^T - I||_F^2``."""
    d = T.shape[-1]
    diff = tc.sub(tc.matmul(T, tc.transpose(T)), np.eye(d))
    return tc.mul(tc.total(tc.mul(diff, diff)), 1.0 / T.shape[0])


def predict_raw(params: NetworkParameters, features) -> np.ndarray:
    """Infer-mode forward without recording a tape."""
    return forward(params, features, train=False).data


# ---------------------------------------------------------------------------
# checkpoint file: "BMCK" | u32 version | u32 input_dim | u32 gfv | u8 mode-tag len + tag
#   | u64 seed | u32 json-config len + json | u32 n_arrays |
#   per array: u16 name len + name | u8 ndim | u64 dims... | f64 data
# ---------------------------------------------------------------------------
CHECKPOINT_MAGIC = b"BMCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: NetworkParameters, path, extra: Optional[dict] = None) -> None:
    import json

    from .io import atomic_write

    cfg = params.config
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<III", CHECKPOINT_VERSION, cfg.input_dim, cfg.gfv_size)
    tag = cfg.feature_mode.encode()
    buf += struct.pack("<B", len(tag)) + tag
    buf += struct.pack("<Q", params.seed)
    meta = json.dumps({"config": cfg.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    buf += struct.pack("<I", len(meta)) + meta
    arrays = params.arrays()
    buf += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        nb = name.encode()
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes()
    atomic_write(path, bytes(buf))


def read_checkpoint(path) -> tuple[dict, dict]:
    """Parse a checkpoint into ``(header, arrays)`` without building a network."""
    import json

    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CompatibilityError(f"{path}: not a checkpoint file (bad magic)")
    off = 4
    version, input_dim, gfv = struct.unpack_from("<III", data, off)
    off += 12
    if version != CHECKPOINT_VERSION:
        raise CompatibilityError(f"unsupported checkpoint version {version}")
    (tlen,) = struct.unpack_from("<B", data, off)
    off += 1
    mode = data[off:off + tlen].decode()
    off += tlen
    (seed,) = struct.unpack_from("<Q", data, off)
    off += 8
    (mlen,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off:off + mlen])
    off += mlen
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nl].decode()
        off += nl
        (nd,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{nd}Q", data, off)
        off += 8 * nd
        count = int(np.prod(shape)) if nd else 1
        arrays[name] = np.frombuffer(data, "<f8", count, off).reshape(shape).astype(np.float64)
        off += 8 * count
    header = {"input_dim": input_dim, "gfv_size": gfv, "feature_mode": mode, "seed": seed,
              "config": meta["config"], "extra": meta.get("extra", {})}
    return header, arrays


def load_checkpoint(path, expected: Optional[NetworkConfig] = None) -> NetworkParameters:
    header, arrays = read_checkpoint(path)
    cfg = NetworkConfig.from_dict(header["config"])
    if expected is not None and expected != cfg:
        diffs = [f"{k}: expected {v}, found {getattr(cfg, k)}"
                 for k, v in expected.to_dict().items() if cfg.to_dict()[k] != v]
        raise CompatibilityError("checkpoint config mismatch: " + "; ".join(diffs))
    params = init_network(cfg, seed=header["seed"])
    params.load_arrays(arrays)
    params.extra = header["extra"]
    return params


def check_feature_mode(params: NetworkParameters, features: np.ndarray) -> None:
    d = np.shape(features)[-1]
    if d != params.config.input_dim:
        found = "pbk" if d == 9 else "pb" if d == 7 else f"{d}-component"
        raise CompatibilityError(
            f"network expects {params.feature_mode} features ({params.config.input_dim} "
            f"components), got {found} features ({d} components)")
