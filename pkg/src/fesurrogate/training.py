"""Bootstrap-aggregating training: with-replacement point sampling + Adam on MSE."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensorcore as tc
from .evaluation import format_table, nodal_errors, quartiles, region_errors, rows_to_csv, summarise
from .inference import predict
from .network import NetworkConfig, NetworkParameters, forward, init_network, orthogonality_penalty

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# narrower T-nets and head for single-CPU runs; mlp1/mlp2 and dropout as published
DESK_NETWORK = {"tnet_mlp": [64, 128, 256], "tnet_fc": [128, 64], "head": [256, 128, 64]}


@dataclass(frozen=True)
class TrainConfig:
    points_per_pass: int = 512
    minibatch: int = 32
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    epsilon: float = 1e-8
    epochs: int = 10
    seed: int = 0
    gfv_size: int = 1024
    feature_mode: str = "pbk"
    # overrides forwarded to NetworkConfig (e.g. narrower T-nets for desk runs)
    network: dict = field(default_factory=dict)
    val_passes: Optional[int] = None
    max_iterations: Optional[int] = None
    # "constant" or "cosine" (decays to lr_floor * learning_rate by the last epoch)
    lr_schedule: str = "constant"
    lr_floor: float = 0.05
    # train-mode minibatches averaged into fresh batch-norm statistics after each epoch (0 = off)
    bn_recalibration: int = 0

    def __post_init__(self):
        if self.points_per_pass < 2:
            raise ValueError("points_per_pass must be >= 2")
        if self.minibatch < 1:
            raise ValueError("minibatch must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.feature_mode not in ("pbk", "pb"):
            raise ValueError(f"feature_mode must be 'pbk' or 'pb', got {self.feature_mode!r}")
        object.__setattr__(self, "betas", tuple(self.betas))

    def network_config(self) -> NetworkConfig:
        overrides = {k: (tuple(v) if isinstance(v, list) else v) for k, v in self.network.items()}
        return NetworkConfig(input_dim=9 if self.feature_mode == "pbk" else 7,
                             gfv_size=self.gfv_size, **overrides)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)       # dicts: epoch, train_loss, val_mae, seconds
    iteration_losses: list = field(default_factory=list)
    coverage: list = field(default_factory=list)     # fraction of distinct nodes seen per epoch
    best_epoch: int = -1
    total_seconds: float = 0.0

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_mae,seconds"]
        for e in self.epochs:
            val = "" if e["val_mae"] is None else repr(e["val_mae"])
            lines.append(f"{e['epoch']},{e['train_loss']!r},{val},{e['seconds']:.3f}")
        return "\n".join(lines) + "\n"


def _arrays(sample):
    """``(features, targets)`` from a SimulationSample or FeatureVectorSet."""
    if hasattr(sample, "displacements"):
        return sample.features, sample.displacements
    return sample.features, sample.targets


def bootstrap_indices(n_nodes: int, points: int, rng: np.random.Generator) -> np.ndarray:
    if n_nodes < 1:
        raise TrainingError("cannot bootstrap an empty sample")
    return rng.integers(0, n_nodes, points)


def bootstrap_sample(sample, points: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``points`` rows uniformly with replacement; features and targets share indices."""
    feats, targets = _arrays(sample)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = bootstrap_indices(len(feats), points, rng)
    return feats[idx], targets[idx]


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update of ``params``."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("params, grads and optimiser state differ in length")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def select_mode(samples: Sequence, mode: str) -> list:
    """Return samples in ``mode``; pbk data is stripped for pb, the reverse is an error."""
    from .fesolver import SimulationSample

    out = []
    for s in samples:
        d = s.features.shape[1]
        if (mode == "pbk" and d == 9) or (mode == "pb" and d == 7):
            out.append(s)
        elif mode == "pb" and d == 9:
            out.append(SimulationSample(s.features[:, :7], s.displacements, s.labels, s.meta))
        else:
            raise TrainingError(f"cannot train a {mode} network on {d}-component features")
    return out


def fit_normalisation(params: NetworkParameters, samples: Sequence) -> None:
    feats = np.concatenate([_arrays(s)[0] for s in samples])
    targets = np.concatenate([_arrays(s)[1] for s in samples])
    std = feats.std(axis=0)
    params.input_mean = feats.mean(axis=0)
    params.input_std = np.where(std > 0, std, 1.0)
    scale = float(np.sqrt(np.mean(targets ** 2)))
    params.target_scale = scale if scale > 0 else 1.0


def validation_mae(params: NetworkParameters, samples: Sequence, points_per_pass: int,
                   passes: Optional[int], seed: int) -> float:
    """Mean all-points MAE (mm) of bagged predictions over ``samples``."""
    errs = []
    for i, s in enumerate(samples):
        feats, targets = _arrays(s)
        pred = predict(params, feats, points_per_pass, passes, seed + i).displacement
        errs.append(nodal_errors(pred, targets))
    return float(np.mean(np.concatenate(errs)))


def recalibrate_batch_norm(params: NetworkParameters, samples: Sequence, points_per_pass: int,
                           minibatch: int, batches: int, rng: np.random.Generator) -> None:
    """Replace running batch-norm statistics by an equal-weight average over
    ``batches`` train-mode minibatches drawn like training ones (weights frozen).

    The exponential running average mostly reflects the last few updates,
    whose noisy T-net statistics (only ``minibatch`` rows) can sit far from
    the population values used at inference.
    """
    states = list(params.bn.values())
    try:
        for k in range(batches):
            for st in states:
                st.momentum = k / (k + 1.0)
            members = rng.choice(len(samples), size=min(minibatch, len(samples)), replace=False)
            xs = []
            for j in members:
                feats = _arrays(samples[j])[0]
                xs.append(feats[bootstrap_indices(len(feats), points_per_pass, rng)])
            forward(params, np.stack(xs), train=True, rng=rng)
    finally:
        for st in states:
            st.momentum = None


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    if config.lr_schedule == "constant" or config.epochs < 2:
        return config.learning_rate
    floor = config.lr_floor * config.learning_rate
    frac = epoch / (config.epochs - 1)
    return floor + 0.5 * (config.learning_rate - floor) * (1.0 + math.cos(math.pi * frac))


def train(train_samples: Sequence, config: TrainConfig, val_samples: Sequence = (),
          params: Optional[NetworkParameters] = None, progress=None
          ) -> tuple[NetworkParameters, TrainLog]:
    """Train a network; returns the best-validation parameters and the log.

    Each epoch visits every simulation once in a shuffled order; each
    minibatch member is a fresh with-replacement draw of ``points_per_pass``
    points from its simulation.
    """
    if not train_samples:
        raise TrainingError("training set is empty")
    for s in list(train_samples) + list(val_samples):
        d = s.features.shape[1]
        if d != (9 if config.feature_mode == "pbk" else 7):
            raise TrainingError(f"feature-mode mismatch: config is {config.feature_mode} "
                                f"but data has {d} components")
    net_cfg = config.network_config()
    if params is None:
        params = init_network(net_cfg, seed=config.seed)
        fit_normalisation(params, train_samples)
    weights = params.trainable()
    state = AdamState.zeros_like([w.data for w in weights])
    rng = np.random.default_rng([config.seed, 1])
    S, B = config.points_per_pass, config.minibatch
    tlog = TrainLog()
    best = None
    best_val = math.inf
    it = 0
    t_start = time.perf_counter()
    n = len(train_samples)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = learning_rate_at(config, epoch)
        order = rng.permutation(n)
        losses = []
        seen = [np.zeros(len(s.features), dtype=bool) for s in train_samples]
        for start in range(0, n, B):
            members = order[start:start + B]
            xs, ys = [], []
            for j in members:
                idx = bootstrap_indices(len(train_samples[j].features), S, rng)
                seen[j][idx] = True
                feats, targets = _arrays(train_samples[j])
                xs.append(feats[idx])
                ys.append(targets[idx])
            X = np.stack(xs)
            Y = np.stack(ys) / params.target_scale
            with tc.Tape() as tape:
                out, transforms = forward(params, X, train=True, rng=rng, return_transforms=True)
                # loss in units of the target scale keeps Adam's epsilon negligible
                loss = tc.mse(tc.mul(out, 1.0 / params.target_scale), Y)
                if net_cfg.orthogonality_weight > 0:
                    for T in transforms[1:]:
                        loss = tc.add(loss, tc.mul(orthogonality_penalty(T),
                                                   net_cfg.orthogonality_weight))
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, iteration {it} "
                                    f"(simulations {members.tolist()})")
            grads = tape.backward(loss)
            adam_step([w.data for w in weights],
                      [grads.get(w, np.zeros_like(w.data)) for w in weights],
                      state, lr, config.betas, config.epsilon)
            losses.append(value)
            tlog.iteration_losses.append(value)
            it += 1
            if config.max_iterations is not None and it >= config.max_iterations:
                break
        if config.bn_recalibration > 0:
            recalibrate_batch_norm(params, train_samples, S, B, config.bn_recalibration,
                                   np.random.default_rng([config.seed, 2, epoch]))
        val = None
        if val_samples:
            val = validation_mae(params, val_samples, S, config.val_passes, config.seed)
            if val < best_val:
                best_val = val
                best = params.copy()
                tlog.best_epoch = epoch
        tlog.coverage.append(float(np.mean([m.mean() for m in seen])))
        tlog.epochs.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                            "val_mae": val, "seconds": time.perf_counter() - t0})
        if progress:
            progress(tlog.epochs[-1])
        log.info("epoch %d loss %.5g val_mae %s (%.1fs)", epoch, np.mean(losses), val,
                 time.perf_counter() - t0)
        if config.max_iterations is not None and it >= config.max_iterations:
            break
    if best is None:
        best = params
        tlog.best_epoch = len(tlog.epochs) - 1
    best.extra = {"training_phantoms": sorted({s.meta.get("phantom_id") for s in train_samples
                                               if s.meta.get("phantom_id") is not None}),
                  "feature_mode": config.feature_mode, "train_seed": config.seed}
    tlog.total_seconds = time.perf_counter() - t_start
    return best, tlog


def score(params: NetworkParameters, samples: Sequence, points_per_pass: int,
          passes: Optional[int] = None, seed: int = 0) -> dict:
    """Table-row metrics (mm) of bagged predictions over ``samples``."""
    errs, labels = [], []
    for i, s in enumerate(samples):
        feats, targets = _arrays(s)
        if feats.shape[1] != params.config.input_dim:
            feats = feats[:, :params.config.input_dim]
        pred = predict(params, feats, points_per_pass, passes, seed + i).displacement
        errs.append(nodal_errors(pred, targets))
        labels.append(s.labels)
    e = np.concatenate(errs)
    lab = np.concatenate(labels)
    overall = summarise(e)
    q = quartiles(e)
    reg = region_errors(e, lab)
    return {"mae": overall.mae, "std": overall.std, "q1": q[0], "q2": q[1], "q3": q[2],
            "cz_mae": reg["CZ"].mae if reg["CZ"] else None,
            "cz_std": reg["CZ"].std if reg["CZ"] else None,
            "wg_mae": reg["WG"].mae if reg["WG"] else None,
            "wg_std": reg["WG"].std if reg["WG"] else None,
            "case_mae": [float(x.mean()) for x in errs]}


@dataclass
class AblationResult:
    axis: str
    rows: list
    logs: dict

    def to_text(self) -> str:
        section = {"gfv": "GFV Sizes", "materials": "Input Feat. Vectors"}[self.axis]
        return format_table(self.rows, section, "Results on evaluation set", key="value")

    def to_csv(self) -> str:
        return rows_to_csv([{k: v for k, v in r.items() if k != "case_mae"} for r in self.rows])


def ablation_run(train_samples: Sequence, val_samples: Sequence, eval_samples: Sequence,
                 axis: str, values: Sequence, config: TrainConfig) -> AblationResult:
    """Train one model per axis value under otherwise identical settings."""
    if axis not in ("gfv", "materials"):
        raise ValueError(f"axis must be 'gfv' or 'materials', got {axis!r}")
    rows, logs = [], {}
    for value in values:
        if axis == "gfv":
            cfg = dataclasses.replace(config, gfv_size=int(value))
        else:
            cfg = dataclasses.replace(config, feature_mode=str(value))
        tr = select_mode(train_samples, cfg.feature_mode)
        va = select_mode(val_samples, cfg.feature_mode)
        ev = select_mode(eval_samples, cfg.feature_mode)
        params, tlog = train(tr, cfg, va)
        row = {"value": value, **score(params, ev, cfg.points_per_pass, cfg.val_passes, cfg.seed)}
        rows.append(row)
        logs[value] = tlog
    return AblationResult(axis, rows, logs)
