"""Adam, checkpoints and the two-stage training protocol.

Stage 1 fits the heart-rate predictor (HRP) on clean segments with a squared
BPM error.  Stage 2 trains the denoiser with the HRP frozen, adding the HR
term of the staged loss once ``epoch >= E_w``.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import zscore
from .metrics import LossWeights, hr_mae, mse, staged_loss
from .models import (DPNetConfig, HRPConfig, config_digest, dpnet_forward, hrp_forward,
                     init_params)


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """One in-place Adam update; returns ``params`` for convenience."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g)
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params


class Adam:
    """Thin wrapper driving :func:`adam_step` over autodiff tensors."""

    def __init__(self, tensors: list[Tensor], lr: float, clip_norm: float | None = None):
        self.tensors = list(tensors)
        self.state = AdamState(lr=lr)
        self.clip_norm = clip_norm

    def step(self) -> float:
        """Apply one update from the tensors' gradients; returns the gradient norm."""
        grads = [t.grad for t in self.tensors]
        norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
        if self.clip_norm is not None and norm > self.clip_norm:
            grads = [g * (self.clip_norm / norm) for g in grads]
        adam_step([t.data for t in self.tensors], grads, self.state)
        for t in self.tensors:
            t.zero_grad()
        return norm


# ---------------------------------------------------------------- config

@dataclass
class TrainConfig:
    lr: float = 1e-5
    batch: int = 64
    hrp_epochs: int = 200
    dpnet_epochs: int = 600
    E_w: int = 300
    lam1: float = 1e-4
    lam2: float = 1e-3
    seed: int = 0
    checkpoint_dir: Optional[str] = None
    dtype: str = "float64"
    clip_norm: Optional[float] = None
    micro_batch: Optional[int] = None  # gradient accumulation; None = whole batch at once
    hrp_batch: Optional[int] = None  # HRP pre-training batch; None = batch
    dpnet: DPNetConfig = field(default_factory=DPNetConfig)
    hrp: HRPConfig = field(default_factory=HRPConfig)

    def __post_init__(self):
        if isinstance(self.dpnet, dict):
            self.dpnet = DPNetConfig(**self.dpnet)
        if isinstance(self.hrp, dict):
            self.hrp = HRPConfig(**self.hrp)
        if min(self.hrp_epochs, self.dpnet_epochs, self.E_w) < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.micro_batch is not None and self.micro_batch < 1:
            raise ValueError("micro_batch must be >= 1")
        if self.hrp_batch is not None and self.hrp_batch < 1:
            raise ValueError("hrp_batch must be >= 1")
        LossWeights(self.lam1, self.lam2, self.E_w)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lam1, self.lam2, self.E_w)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dpnet"] = self.dpnet.to_dict()
        d["hrp"] = self.hrp.to_dict()
        return d

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        # full-size activations for 64 segments do not fit in a few GB of RAM
        base = dict(micro_batch=8)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        # 16 gives the HRP enough Adam steps in 50 epochs to converge on 160 segments
        base = dict(lr=1e-3, hrp_epochs=50, dpnet_epochs=80, E_w=40, dtype="float32", hrp_batch=16,
                    dpnet=DPNetConfig(D=16, n_blocks=2, state_dim=8, expand=1),
                    hrp=HRPConfig(D=8, n_blocks=2, state_dim=8, expand=1, hidden=32))
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"DPNC"
CKPT_VERSION = 1
META_PREFIX = "__"


class CheckpointError(ValueError):
    """Corrupt, truncated or unsupported checkpoint file."""


class ConfigDriftError(CheckpointError):
    """Checkpoint was written for a different model configuration."""


@dataclass
class Checkpoint:
    config: object  # DPNetConfig | HRPConfig
    tensors: dict  # name -> float32 array
    epoch: int = 0
    metrics: dict = field(default_factory=dict)
    version: int = CKPT_VERSION

    @property
    def digest(self) -> bytes:
        return config_digest(self.config)

    def params(self, dtype=np.float32):
        """Rebuild model parameters from the stored tensors."""
        p = init_params(self.config, seed=0, dtype=dtype)
        named = p.tensors()
        missing = set(named) - set(self.tensors)
        if missing:
            raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
        for k, t in named.items():
            arr = self.tensors[k]
            if arr.shape != t.shape:
                raise CheckpointError(f"tensor {k}: stored shape {arr.shape}, model expects {t.shape}")
            t.data = arr.astype(dtype).copy()
        return p


def snapshot(params) -> dict:
    return {k: t.data.astype(np.float32) for k, t in params.tensors().items()}


def _config_json(config) -> dict:
    return {"kind": type(config).__name__, "config": config.to_dict()}


def config_from_json(obj: dict):
    kinds = {"DPNetConfig": DPNetConfig, "HRPConfig": HRPConfig}
    if obj.get("kind") not in kinds:
        raise CheckpointError(f"unknown model kind {obj.get('kind')!r}")
    return kinds[obj["kind"]](**obj["config"])


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Binary tensor table plus a ``.json`` sidecar describing the config."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = dict(ckpt.tensors)
    entries[f"{META_PREFIX}epoch__"] = np.asarray(ckpt.epoch, dtype=np.float32)
    for k, v in sorted(ckpt.metrics.items()):
        entries[f"{META_PREFIX}{k}__"] = np.asarray(v, dtype=np.float32)
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), ckpt.digest, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        nb = name.encode()
        chunks.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))
    sidecar = {**_config_json(ckpt.config), "epoch": ckpt.epoch, "metrics": ckpt.metrics,
               "sha256": hashlib.sha256(path.read_bytes()).hexdigest()}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path, config=None) -> Checkpoint:
    """Load and validate.  ``config`` (if given) must match the stored digest."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"checkpoint {path} does not exist") from None
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = raw[pos:pos + n]
        pos += n
        return out

    if take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unknown checkpoint version {version}")
    digest = take(32)
    (count,) = struct.unpack("<I", take(4))
    tensors, meta = {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode()
        except UnicodeDecodeError:
            raise CheckpointError(f"{path}: corrupt tensor name") from None
        (rank,) = struct.unpack("<I", take(4))
        if rank > 8:
            raise CheckpointError(f"{path}: implausible tensor rank {rank}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        if name.startswith(META_PREFIX) and name.endswith("__"):
            meta[name[2:-2]] = float(arr)
        else:
            tensors[name] = arr
    if pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    if config is None:
        side = Path(str(path) + ".json")
        if not side.exists():
            raise CheckpointError(f"{path}: no config given and sidecar {side.name} is missing")
        config = config_from_json(json.loads(side.read_text()))
    if config_digest(config) != digest:
        raise ConfigDriftError(f"{path}: config digest mismatch (model config changed since save)")
    epoch = int(meta.pop("epoch", 0))
    return Checkpoint(config, tensors, epoch, meta, version)


# ---------------------------------------------------------------- training

@dataclass
class TrainData:
    """Arrays for one split.  ``clean``/``noisy`` are (N, L); bpm is (N,)."""

    clean: np.ndarray
    noisy: np.ndarray
    bpm: np.ndarray

    def __len__(self):
        return len(self.bpm)

    @classmethod
    def from_segments(cls, segments, split: str) -> "TrainData":
        from .store import arrays
        return cls(*arrays(segments, split))


@dataclass
class TrainResult:
    checkpoint: Checkpoint  # best by validation
    params: object  # final (last-epoch) parameters
    history: list
    state: Optional[dict] = None  # resumable snapshot, see ``train_dpnet(branch_at=...)``


def micro_batches(idx: np.ndarray, size: int | None):
    """Split one batch into (indices, loss weight) parts whose weighted gradients sum to the batch gradient."""
    if size is None or size >= len(idx):
        return [(idx, None)]
    return [(idx[i:i + size], len(idx[i:i + size]) / len(idx)) for i in range(0, len(idx), size)]


def batches(n: int, batch: int, seed: int, epoch: int):
    """Shuffled index batches; the order depends only on (seed, epoch)."""
    order = np.random.default_rng([seed, epoch, 0xBA7C4]).permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def _emit(log, row):
    if log is not None:
        log(row)


def _logger(log, path):
    """Combine a row callback with an optional JSON-lines file."""
    if path is None:
        return log
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("")

    def write(row):
        with path.open("a") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        if log is not None:
            log(row)
    return write


def _check_split(d: TrainData, name: str):
    if d is None or len(d) == 0:
        raise ValueError(f"the {name} split is empty")


def predict_hr(params, x: np.ndarray, dtype, chunk: int = 64) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, len(x), chunk):
            out.append(hrp_forward(Tensor(x[i:i + chunk, None, :].astype(dtype)), params).data)
    return np.concatenate(out).astype(float) if out else np.zeros(0)


def denoise_batch(params, noisy: np.ndarray, dtype=np.float32, chunk: int = 64) -> np.ndarray:
    """Denoise (N, L) raw noisy segments; inputs are z-scored first."""
    x = zscore(noisy)
    out = []
    with ad.no_grad():
        for i in range(0, len(x), chunk):
            out.append(dpnet_forward(Tensor(x[i:i + chunk, None, :].astype(dtype)), params).data[:, 0, :])
    return np.concatenate(out).astype(float) if out else np.zeros((0, noisy.shape[-1]))


def train_hrp(train: TrainData, val: TrainData, config: TrainConfig, log: Callable | None = None,
              log_path=None) -> TrainResult:
    """Fit the HRP to BPM labels on clean segments; keep the lowest val HR-MAE."""
    _check_split(train, "train")
    _check_split(val, "val")
    log = _logger(log, log_path)
    dt = config.np_dtype
    params = init_params(config.hrp, seed=[config.seed, 1], dtype=dt)
    params.b2.data[:] = float(np.mean(train.bpm))
    opt = Adam(list(params.tensors().values()), config.lr, config.clip_norm)
    xs = train.clean.astype(dt)
    ys = train.bpm.astype(dt)
    history, best = [], None
    for epoch in range(config.hrp_epochs):
        tot, cnt = 0.0, 0
        for batch in batches(len(train), config.hrp_batch or config.batch, config.seed, epoch):
            for idx, weight in micro_batches(batch, config.micro_batch):
                pred = hrp_forward(Tensor(xs[idx, None, :]), params)
                err = ad.sub(pred, Tensor(ys[idx]))
                loss = ad.mean(ad.mul(err, err))
                ad.backward(loss, None if weight is None else np.array(weight))
                tot += float(loss.data) * len(idx)
                cnt += len(idx)
            opt.step()
        val_mae = float(np.mean(np.abs(predict_hr(params, val.clean, dt) - val.bpm)))
        row = {"epoch": epoch, "l_mse": tot / cnt, "val_hr_mae": val_mae}
        history.append(row)
        _emit(log, row)
        if best is None or val_mae < best.metrics["val_hr_mae"]:
            best = Checkpoint(config.hrp, snapshot(params), epoch, {"val_hr_mae": val_mae})
    if best is None:  # zero epochs
        val_mae = float(np.mean(np.abs(predict_hr(params, val.clean, dt) - val.bpm)))
        best = Checkpoint(config.hrp, snapshot(params), 0, {"val_hr_mae": val_mae})
    if config.checkpoint_dir:
        save_checkpoint(Path(config.checkpoint_dir) / "hrp_best.ckpt", best)
    return TrainResult(best, params, history)


def validate_dpnet(params, val: TrainData, dtype, fs: float = 125.0) -> tuple[float, float]:
    d = denoise_batch(params, val.noisy, dtype)
    v_mse = float(np.mean([mse(g, x) for g, x in zip(val.clean, d)]))
    maes = [m for m in (hr_mae(g, x, fs) for g, x in zip(val.clean, d)) if m is not None]
    return v_mse, float(np.mean(maes)) if maes else float("nan")


def _better(a: dict, b: dict | None) -> bool:
    if b is None:
        return True
    if a["val_mse"] != b["val_mse"]:
        return a["val_mse"] < b["val_mse"]
    return a["val_hr_mae"] < b["val_hr_mae"]


def train_dpnet(train: TrainData, val: TrainData, hrp, config: TrainConfig,
                log: Callable | None = None, log_path=None, resume: dict | None = None,
                branch_at: int | None = None) -> TrainResult:
    """Train DPNet against a frozen HRP.

    ``hrp`` is an HRP ``Checkpoint`` (or HRP parameters).  Its tensors have
    ``requires_grad`` switched off, so gradients flow through it into the
    denoiser but it is never updated.  ``branch_at=e`` stores a resumable
    copy of the run state at the start of epoch ``e`` in ``result.state``;
    passing that dict as ``resume`` continues from there (possibly with
    different loss weights after the branch point).
    """
    if hrp is None:
        raise ValueError("train_dpnet needs a frozen HRP checkpoint")
    _check_split(train, "train")
    _check_split(val, "val")
    log = _logger(log, log_path)
    dt = config.np_dtype
    w = config.weights
    hrp_params = hrp.params(dt) if isinstance(hrp, Checkpoint) else hrp
    hrp_tensors = list(hrp_params.tensors().values())
    for t in hrp_tensors:
        t.requires_grad = False
        t.zero_grad()

    if resume is None:
        params = init_params(config.dpnet, seed=[config.seed, 2], dtype=dt)
        opt = Adam(list(params.tensors().values()), config.lr, config.clip_norm)
        start, history, best = 0, [], None
    else:
        params = copy.deepcopy(resume["params"])
        opt = Adam(list(params.tensors().values()), config.lr, config.clip_norm)
        opt.state = copy.deepcopy(resume["opt_state"])
        start = resume["epoch"]
        history = [dict(r) for r in resume["history"]]
        best = resume["best"]
    xs = zscore(train.noisy).astype(dt)
    gs = train.clean.astype(dt)
    ys = train.bpm.astype(dt)
    state = None
    for epoch in range(start, config.dpnet_epochs):
        if branch_at is not None and epoch == branch_at:
            state = {"params": copy.deepcopy(params), "opt_state": copy.deepcopy(opt.state),
                     "epoch": epoch, "history": [dict(r) for r in history], "best": best}
        sums = np.zeros(3)
        cnt = 0
        hrp_grad = 0.0
        use_hr = epoch >= w.E_w and w.lam2 > 0
        for batch in batches(len(train), config.batch, config.seed, epoch):
            for idx, weight in micro_batches(batch, config.micro_batch):
                d = dpnet_forward(Tensor(xs[idx, None, :]), params)
                pred = hrp_forward(d, hrp_params) if use_hr else None
                parts = staged_loss(epoch, Tensor(gs[idx, None, :]), d,
                                    ys[idx] if use_hr else None, pred,
                                    w if use_hr else dataclasses.replace(w, E_w=max(w.E_w, epoch + 1)))
                ad.backward(parts.total, None if weight is None else np.array(weight))
                hrp_grad = max(hrp_grad, max(float(np.abs(t.grad).max()) if t.grad is not None else 0.0
                                             for t in hrp_tensors))
                sums += np.array([parts.l_mse, parts.l_sisdr, parts.l_mae]) * len(idx)
                cnt += len(idx)
            opt.step()
        v_mse, v_mae = validate_dpnet(params, val, dt)
        row = {"epoch": epoch, "l_mse": float(sums[0] / cnt), "l_sisdr": float(sums[1] / cnt),
               "l_mae": float(sums[2] / cnt),
               "hr_term": bool(epoch >= w.E_w), "val_mse": v_mse, "val_hr_mae": v_mae,
               "hrp_grad_max": hrp_grad}
        history.append(row)
        _emit(log, row)
        metrics = {"val_mse": v_mse, "val_hr_mae": v_mae}
        if _better(metrics, best.metrics if best else None):
            best = Checkpoint(config.dpnet, snapshot(params), epoch, metrics)
    if best is None:
        v_mse, v_mae = validate_dpnet(params, val, dt)
        best = Checkpoint(config.dpnet, snapshot(params), 0, {"val_mse": v_mse, "val_hr_mae": v_mae})
    if config.checkpoint_dir:
        save_checkpoint(Path(config.checkpoint_dir) / "dpnet_best.ckpt", best)
    return TrainResult(best, params, history, state)
