"""Expert models: a small frame encoder with a linear head, full fine-tuning
for the shared expert, and low-rank adapter training for attack-specific
experts.

A model is a named-tensor store. Encoder layers are tanh linears over raw
sample frames; each expert carries its own pooled linear head, which is a
training scaffold: fusion consumes encoder features only. Adapters follow the
two-path form x@W0 + s*((x@A)@B) with s = alpha/rank by default (the literal
s = alpha reading is available behind `scale_mode`), A ~ N(0, 0.02), B = 0,
so a freshly injected expert is functionally identical to its base.

Checkpoints are canonical JSON with a content checksum; adapter checkpoints
store only the adapter and head tensors plus the checksum of the base
encoder they bind to.
"""
from __future__ import annotations

import json
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tc
from .audio import AudioClip
from .corpus import stable_seed, resolve_clip
from .metrics import ScoreSet, compute_eer

LABEL_INDEX = {"bonafide": 0, "spoof": 1}
SCALE_ALPHA_OVER_R = "alpha_over_r"
SCALE_ALPHA_LITERAL = "alpha_literal"
LORA_INIT_STD = 0.02


class ExpertError(ValueError):
    pass


class FrozenContractError(RuntimeError):
    """A tensor flagged frozen changed during training."""


class CheckpointError(ValueError):
    pass


@dataclass
class EncoderConfig:
    frame_len: int = 160
    hop: int = 160
    hidden_dims: tuple = (64, 64, 64)

    def __post_init__(self):
        self.hidden_dims = tuple(int(d) for d in self.hidden_dims)
        if self.frame_len < 2 or self.hop < 1 or any(d < 2 for d in self.hidden_dims):
            raise ExpertError("encoder dims must be >= 2 and hop >= 1")

    @property
    def feature_dim(self) -> int:
        return self.frame_len

    @property
    def output_dim(self) -> int:
        return self.hidden_dims[-1]

    @property
    def layer_dims(self):
        dims = (self.frame_len, *self.hidden_dims)
        return list(zip(dims[:-1], dims[1:]))

    def to_dict(self) -> dict:
        return {"frame_len": self.frame_len, "hop": self.hop, "hidden_dims": list(self.hidden_dims)}

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        return cls(data["frame_len"], data["hop"], tuple(data["hidden_dims"]))


@dataclass
class LoraAdapter:
    """Low-rank pair for one host linear layer: delta = scale * (a @ b)."""

    a: np.ndarray
    b: np.ndarray
    rank: int
    alpha: float
    dropout_p: float
    scale_mode: str = SCALE_ALPHA_OVER_R

    def __post_init__(self):
        if self.rank < 1:
            raise ExpertError("adapter rank must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ExpertError("adapter dropout must be in [0, 1)")
        if self.scale_mode not in (SCALE_ALPHA_OVER_R, SCALE_ALPHA_LITERAL):
            raise ExpertError(f"unknown scale mode {self.scale_mode!r}")
        if self.a.shape[1] != self.rank or self.b.shape[0] != self.rank:
            raise ExpertError(f"adapter shapes {self.a.shape} x {self.b.shape} disagree with rank {self.rank}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank if self.scale_mode == SCALE_ALPHA_OVER_R else self.alpha


def lora_merged_weight(w0: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """Host weight with the adapter folded in: w0 + scale * (a @ b)."""
    if adapter.a.shape[0] != w0.shape[0] or adapter.b.shape[1] != w0.shape[1]:
        raise ExpertError(
            f"adapter {adapter.a.shape} x {adapter.b.shape} does not match host {w0.shape}"
        )
    return w0 + adapter.scale * tc.matmul_values(adapter.a, adapter.b)


class ExpertModel:
    """Named-tensor store: encoder layers, head, frozen flags, optional adapters."""

    def __init__(self, cfg: EncoderConfig, tensors: dict, frozen=(), lora_meta: dict | None = None):
        self.cfg = cfg
        self.tensors = {name: np.asarray(v, dtype=np.float64) for name, v in tensors.items()}
        self.frozen = set(frozen)
        self.lora_meta = dict(lora_meta) if lora_meta else None

    @property
    def n_layers(self) -> int:
        return len(self.cfg.hidden_dims)

    @property
    def has_adapters(self) -> bool:
        return self.lora_meta is not None

    def adapter(self, layer: int) -> LoraAdapter:
        meta = self.lora_meta
        return LoraAdapter(
            self.tensors[f"lora.a{layer}"],
            self.tensors[f"lora.b{layer}"],
            meta["rank"],
            meta["alpha"],
            meta["dropout_p"],
            meta["scale_mode"],
        )

    def copy(self) -> "ExpertModel":
        return ExpertModel(
            self.cfg,
            {k: v.copy() for k, v in self.tensors.items()},
            set(self.frozen),
            dict(self.lora_meta) if self.lora_meta else None,
        )

    def trainable_names(self):
        return [name for name in sorted(self.tensors) if name not in self.frozen]


def _filterbank_init(m: int, n: int, sample_rate: int = 16000) -> np.ndarray:
    """Windowed cosine/sine pairs on a log frequency grid with a gentle
    high-frequency tilt; keeps band amplitudes inside tanh's useful range."""
    freqs = np.geomspace(100.0, 0.95 * sample_rate / 2.0, n // 2)
    window = np.hanning(m)
    t = np.arange(m) / sample_rate
    w = np.empty((m, n))
    for j, f in enumerate(freqs):
        gain = 0.4 * (f / freqs[0]) ** 0.6
        cos_col = window * np.cos(2.0 * np.pi * f * t)
        sin_col = window * np.sin(2.0 * np.pi * f * t)
        w[:, 2 * j] = gain * cos_col / np.linalg.norm(cos_col)
        w[:, 2 * j + 1] = gain * sin_col / np.linalg.norm(sin_col)
    if n % 2:
        w[:, -1] = window / np.linalg.norm(window)
    return w


def _mixed_pair_init(m: int, n: int, kappa: float = 1.2, beta: float = 0.5):
    """Second-layer structure serving both feature consumers.

    Even bands pass their (cos, sin) quadrature channels straight through, so
    downstream magnitude pooling sees true phase-invariant band amplitudes.
    Odd bands become antisymmetric unit pairs +-kappa*(cos+sin) with a shared
    bias: tanh is odd, so plain time means of raw channels vanish, but a
    rectifier pair's sum is an even, energy-tracking function, which is what
    the gate's time-mean input and the fusion head's attention pooling need.
    """
    w = np.zeros((m, n))
    b = np.zeros((1, n))
    half = min(n, m) // 2
    for j in range(half):
        c_row, s_row = 2 * j, 2 * j + 1
        if j % 2 == 0:
            w[c_row, 2 * j] = 1.0
            w[s_row, 2 * j + 1] = 1.0
        else:
            gain = kappa / np.sqrt(2.0)
            w[c_row, 2 * j] = gain
            w[s_row, 2 * j] = gain
            w[c_row, 2 * j + 1] = -gain
            w[s_row, 2 * j + 1] = -gain
            b[0, 2 * j] = beta
            b[0, 2 * j + 1] = beta
    for col in range(2 * half, n):
        w[col % m, col] = 1.0
    return w, b


def new_expert(cfg: EncoderConfig, seed: int) -> ExpertModel:
    """Fresh model: filterbank first layer, rectifying pair second layer,
    near-identity deeper layers, zero head. Deterministic given the seed."""
    rng = np.random.Generator(np.random.Philox(seed))
    tensors = {}
    for i, (m, n) in enumerate(cfg.layer_dims):
        if i == 0:
            tensors[f"enc.w{i}"] = _filterbank_init(m, n)
            tensors[f"enc.b{i}"] = np.zeros((1, n))
        elif i == 1:
            w, b = _mixed_pair_init(m, n)
            # tiny mixing only: heavier noise leaks loud low-band content into
            # the faint high-band channels and buries their contrast
            tensors[f"enc.w{i}"] = w + rng.normal(0.0, 0.002, size=(m, n))
            tensors[f"enc.b{i}"] = b
        else:
            eye = np.eye(m, n)
            tensors[f"enc.w{i}"] = eye + rng.normal(0.0, 0.002, size=(m, n))
            tensors[f"enc.b{i}"] = rng.normal(0.0, 0.1, size=(1, n))
    tensors["head.w"] = np.zeros((cfg.output_dim, 2))
    tensors["head.b"] = np.zeros((1, 2))
    return ExpertModel(cfg, tensors)


def checksum_tensors(tensors: dict, names=None) -> str:
    digest = hashlib.sha256()
    for name in sorted(names if names is not None else tensors):
        arr = tensors[name]
        digest.update(name.encode())
        digest.update(str(arr.shape).encode())
        digest.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return digest.hexdigest()


def encoder_checksum(model: ExpertModel) -> str:
    names = [n for n in model.tensors if n.startswith("enc.")]
    return checksum_tensors(model.tensors, names)


def frozen_checksum(model: ExpertModel) -> str:
    names = [n for n in model.frozen if n in model.tensors]
    return checksum_tensors(model.tensors, names)


def full_checksum(model: ExpertModel) -> str:
    return checksum_tensors(model.tensors)


def frame_features(clip: AudioClip, cfg: EncoderConfig) -> np.ndarray:
    """(T x frame_len) raw-sample frames, each with its mean removed."""
    n = clip.samples.size
    if n < cfg.frame_len:
        raise ExpertError(f"clip {clip.clip_id!r} shorter than one frame ({n} < {cfg.frame_len})")
    t_count = (n - cfg.frame_len) // cfg.hop + 1
    idx = np.arange(t_count)[:, None] * cfg.hop + np.arange(cfg.frame_len)[None, :]
    frames = clip.samples[idx]
    return frames - frames.mean(axis=1, keepdims=True)


def _dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    return (rng.random(shape) >= p) / (1.0 - p)


def encoder_forward(model: ExpertModel, feats: np.ndarray) -> np.ndarray:
    """Plain (inference) forward; adapters use the two-path form, no dropout."""
    h = feats
    for i in range(model.n_layers):
        pre = tc.matmul_values(h, model.tensors[f"enc.w{i}"]) + model.tensors[f"enc.b{i}"]
        if model.has_adapters:
            adapter = model.adapter(i)
            delta = tc.matmul_values(tc.matmul_values(h, adapter.a), adapter.b)
            pre = pre + delta * adapter.scale
        h = np.tanh(pre)
    return h


POOL_LOG_EPS = 1e-4
POOL_LOG_GAIN = 6.0
PAIR_EPS = 1e-12


def head_pool(z: np.ndarray) -> np.ndarray:
    """Quadrature-magnitude temporal pooling for the expert head.

    Adjacent feature columns are treated as quadrature pairs (the filterbank
    init lays them out that way), giving per-frame band amplitudes that are
    insensitive to carrier phase. Each band contributes two statistics: the
    log temporal contrast (std of the amplitude track) and the log mean
    absolute amplitude delta. The log equalizes dynamic range across bands so
    faint high bands carry as much gradient as loud harmonic ones, and the
    gain sets units so plain gradient descent at the stock learning rate makes
    visible progress within the plateau scheduler's window."""
    if z.shape[1] % 2:
        raise ExpertError("head pooling needs an even encoder output dim")
    even = z[:, 0::2]
    odd = z[:, 1::2]
    mag = np.sqrt(even * even + odd * odd + PAIR_EPS)
    contrast, _ = tc.std_rows_values(mag)
    motion = np.abs(mag[1:] - mag[:-1]).mean(axis=0, keepdims=True)
    pooled = np.concatenate(
        [np.log(contrast + POOL_LOG_EPS), np.log(motion + POOL_LOG_EPS)], axis=1
    )
    return pooled * POOL_LOG_GAIN


def head_logits(model: ExpertModel, z: np.ndarray) -> np.ndarray:
    pooled = head_pool(z)
    return tc.matmul_values(pooled, model.tensors["head.w"]) + model.tensors["head.b"]


def expert_logits(model: ExpertModel, feats: np.ndarray) -> np.ndarray:
    return head_logits(model, encoder_forward(model, feats))


def score_clip(model: ExpertModel, clip: AudioClip) -> float:
    logits = expert_logits(model, frame_features(clip, model.cfg))
    return float(logits[0, 0] - logits[0, 1])


def make_leaves(model: ExpertModel) -> dict:
    return {
        name: tc.Node(value, requires_grad=name not in model.frozen)
        for name, value in model.tensors.items()
    }


def encoder_forward_nodes(model, leaves, feats, dropout_rng=None) -> tc.Node:
    h = tc.constant(feats)
    for i in range(model.n_layers):
        pre = tc.add(tc.matmul(h, leaves[f"enc.w{i}"]), leaves[f"enc.b{i}"])
        if model.has_adapters:
            meta = model.lora_meta
            x_in = h
            if dropout_rng is not None and meta["dropout_p"] > 0.0:
                mask = _dropout_mask(h.value.shape, meta["dropout_p"], dropout_rng)
                x_in = tc.mul(h, tc.constant(mask))
            delta = tc.matmul(tc.matmul(x_in, leaves[f"lora.a{i}"]), leaves[f"lora.b{i}"])
            scale = meta["alpha"] / meta["rank"] if meta["scale_mode"] == SCALE_ALPHA_OVER_R else meta["alpha"]
            pre = tc.add(pre, tc.scale(delta, scale))
        h = tc.tanh(pre)
    return h


def loss_nodes(model, leaves, feats, label: str, dropout_rng=None) -> tc.Node:
    z = encoder_forward_nodes(model, leaves, feats, dropout_rng)
    mag = tc.pair_magnitude(z, PAIR_EPS)
    contrast = tc.log_shift(tc.std_rows(mag), POOL_LOG_EPS)
    motion = tc.log_shift(tc.mean_rows(tc.absval(tc.diff_rows(mag))), POOL_LOG_EPS)
    pooled = tc.scale(tc.hconcat(contrast, motion), POOL_LOG_GAIN)
    logits = tc.add(tc.matmul(pooled, leaves["head.w"]), leaves["head.b"])
    return tc.cross_entropy(logits, LABEL_INDEX[label])


def lora_inject(
    model: ExpertModel,
    rank: int,
    alpha: float,
    dropout_p: float,
    seed: int,
    scale_mode: str = SCALE_ALPHA_OVER_R,
) -> ExpertModel:
    """Freeze the base encoder (weights and biases) and attach fresh adapters.

    The head is copied and stays trainable; with B = 0 the injected model is
    functionally identical to the base.
    """
    if model.has_adapters:
        raise ExpertError("model already has adapters injected")
    out = model.copy()
    rng = np.random.Generator(np.random.Philox(seed))
    for i, (m, n) in enumerate(model.cfg.layer_dims):
        out.tensors[f"lora.a{i}"] = rng.normal(0.0, LORA_INIT_STD, size=(m, rank))
        out.tensors[f"lora.b{i}"] = np.zeros((rank, n))
        out.frozen.add(f"enc.w{i}")
        out.frozen.add(f"enc.b{i}")
    out.lora_meta = {
        "rank": int(rank),
        "alpha": float(alpha),
        "dropout_p": float(dropout_p),
        "scale_mode": scale_mode,
    }
    # validates rank/dropout/scale_mode against the host shapes
    for i in range(out.n_layers):
        out.adapter(i)
    return out


def count_trainable(model: ExpertModel) -> dict:
    """Parameter accounting over the encoder backbone (heads are a training
    scaffold and excluded from the ratio, matching large-scale convention)."""
    base = [n for n in model.tensors if n.startswith("enc.")]
    total = sum(model.tensors[n].size for n in base)
    countable = base + [n for n in model.tensors if n.startswith("lora.")]
    trainable = sum(model.tensors[n].size for n in countable if n not in model.frozen)
    return {"trainable": trainable, "total": total, "percent": 100.0 * trainable / total}


@dataclass
class TrainHyper:
    lr: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 100
    plateau_epochs: int = 3
    lr_factor: float = 0.5
    lr_floor: float = 1e-7
    patience: int = 10

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "plateau_epochs": self.plateau_epochs,
            "lr_factor": self.lr_factor,
            "lr_floor": self.lr_floor,
            "patience": self.patience,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainHyper":
        return cls(**data)


def dev_eer(model: ExpertModel, dev_feats, dev_labels) -> float:
    bona, spoof = [], []
    for feats, label in zip(dev_feats, dev_labels):
        logits = expert_logits(model, feats)
        score = float(logits[0, 0] - logits[0, 1])
        (bona if label == "bonafide" else spoof).append(score)
    return compute_eer(ScoreSet(bona, spoof)).eer


def train_expert(
    model: ExpertModel,
    train_entries,
    dev_entries,
    root,
    hyper: TrainHyper,
    seed: int,
    log=None,
) -> tuple:
    """Gradient-descent training with dev-EER plateau halving and early stop.

    Returns (best model by dev EER, per-epoch history). Frozen tensors are
    checksum-verified; any drift is a hard failure.
    """
    work = model.copy()
    contract = frozen_checksum(work)
    cfg = work.cfg

    def load_feats(entries):
        feats, labels = [], []
        for entry in entries:
            feats.append(frame_features(resolve_clip(entry, root), cfg))
            labels.append(entry.label)
        return feats, labels

    train_feats, train_labels = load_feats(train_entries)
    dev_feats, dev_labels = load_feats(dev_entries)

    lr = hyper.lr
    best = work.copy()
    best_eer = float("inf")
    plateau = 0
    stall = 0
    history = []
    uses_dropout = work.has_adapters and work.lora_meta["dropout_p"] > 0.0

    for epoch in range(hyper.max_epochs):
        shuffle_rng = np.random.Generator(np.random.Philox(stable_seed(seed, "shuffle", epoch)))
        order = shuffle_rng.permutation(len(train_feats))
        epoch_loss = 0.0
        for start in range(0, len(order), hyper.batch_size):
            batch = order[start : start + hyper.batch_size]
            leaves = make_leaves(work)
            total = None
            for idx in batch:
                drop_rng = None
                if uses_dropout:
                    drop_rng = np.random.Generator(
                        np.random.Philox(stable_seed(seed, "dropout", epoch, int(idx)))
                    )
                loss = loss_nodes(work, leaves, train_feats[idx], train_labels[idx], drop_rng)
                total = loss if total is None else tc.add(total, loss)
            try:
                batch_loss = tc.scale(total, 1.0 / len(batch))
                tc.backward(batch_loss)
            except tc.NonFiniteError as exc:
                raise tc.NonFiniteError(
                    f"non-finite loss at epoch {epoch} batch {start // hyper.batch_size}: {exc}"
                ) from exc
            for name, node in leaves.items():
                if node.requires_grad:
                    work.tensors[name] = work.tensors[name] - lr * node.grad
            epoch_loss += float(batch_loss.value[0, 0]) * len(batch)
        epoch_loss /= len(train_feats)
        eer = dev_eer(work, dev_feats, dev_labels)
        history.append({"epoch": epoch, "loss": epoch_loss, "dev_eer": eer, "lr": lr})
        if log is not None:
            log(f"epoch={epoch} loss={epoch_loss:.6f} dev_eer={eer:.4f} lr={lr:.2e}")
        if eer < best_eer:
            best_eer = eer
            best = work.copy()
            plateau = 0
            stall = 0
        else:
            plateau += 1
            stall += 1
            if plateau >= hyper.plateau_epochs:
                lr = max(lr * hyper.lr_factor, hyper.lr_floor)
                plateau = 0
            if stall >= hyper.patience:
                break

    if frozen_checksum(work) != contract or frozen_checksum(best) != contract:
        raise FrozenContractError("frozen tensors changed during training")
    return best, history


def train_shared(cfg: EncoderConfig, train_entries, dev_entries, root,
                 hyper: TrainHyper, seed: int, log=None) -> tuple:
    """Full fine-tuning of a fresh model on the clean condition."""
    model = new_expert(cfg, stable_seed(seed, "init"))
    return train_expert(model, train_entries, dev_entries, root, hyper,
                        stable_seed(seed, "shared"), log=log)


def train_ase(
    base: ExpertModel,
    condition: str,
    train_entries,
    dev_entries,
    root,
    rank: int,
    alpha: float,
    dropout_p: float,
    hyper: TrainHyper,
    seed: int,
    scale_mode: str = SCALE_ALPHA_OVER_R,
    log=None,
) -> tuple:
    """Adapter + head training on one attacked condition; base stays frozen."""
    injected = lora_inject(base, rank, alpha, dropout_p,
                           stable_seed(seed, "inject", condition), scale_mode)
    return train_expert(injected, train_entries, dev_entries, root, hyper,
                        stable_seed(seed, "ase", condition), log=log)


# --- checkpoint I/O ----------------------------------------------------------

CHECKPOINT_VERSION = 1


def _tensor_payload(tensors: dict, names) -> dict:
    return {
        name: {"shape": list(tensors[name].shape), "data": tensors[name].ravel().tolist()}
        for name in sorted(names)
    }


def _payload_checksum(payload: dict) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _write_payload(payload: dict, path) -> str:
    payload = dict(payload)
    payload["checksum"] = _payload_checksum({k: v for k, v in payload.items() if k != "checksum"})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")
    return payload["checksum"]


def _read_payload(path, expected_format: str) -> dict:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != expected_format:
        raise CheckpointError(f"{path}: expected {expected_format}, got {payload.get('format')!r}")
    stored = payload.get("checksum")
    actual = _payload_checksum({k: v for k, v in payload.items() if k != "checksum"})
    if stored != actual:
        raise CheckpointError(f"{path}: content checksum mismatch")
    return payload


def _tensors_from_payload(data: dict) -> dict:
    return {
        name: np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
        for name, spec in data.items()
    }


def save_expert_checkpoint(model: ExpertModel, path) -> str:
    payload = {
        "format": "expert-checkpoint",
        "version": CHECKPOINT_VERSION,
        "encoder": model.cfg.to_dict(),
        "tensors": _tensor_payload(model.tensors, model.tensors),
        "frozen": sorted(model.frozen),
        "lora": model.lora_meta,
    }
    return _write_payload(payload, path)


def load_expert_checkpoint(path) -> ExpertModel:
    payload = _read_payload(path, "expert-checkpoint")
    cfg = EncoderConfig.from_dict(payload["encoder"])
    return ExpertModel(cfg, _tensors_from_payload(payload["tensors"]),
                       payload["frozen"], payload.get("lora"))


def save_adapter_checkpoint(model: ExpertModel, path) -> str:
    """Adapters + head only, bound to the base encoder by checksum."""
    if not model.has_adapters:
        raise CheckpointError("model has no adapters to checkpoint")
    names = [n for n in model.tensors if n.startswith("lora.") or n.startswith("head.")]
    payload = {
        "format": "adapter-checkpoint",
        "version": CHECKPOINT_VERSION,
        "encoder": model.cfg.to_dict(),
        "tensors": _tensor_payload(model.tensors, names),
        "lora": model.lora_meta,
        "base_checksum": encoder_checksum(model),
    }
    return _write_payload(payload, path)


def load_adapter_checkpoint(path, base: ExpertModel) -> ExpertModel:
    payload = _read_payload(path, "adapter-checkpoint")
    if payload["base_checksum"] != encoder_checksum(base):
        raise CheckpointError(f"{path}: adapter is bound to a different base encoder")
    if base.has_adapters:
        raise CheckpointError("cannot load an adapter onto an already adapted model")
    out = base.copy()
    out.tensors.update(_tensors_from_payload(payload["tensors"]))
    out.lora_meta = dict(payload["lora"])
    for i in range(out.n_layers):
        out.frozen.add(f"enc.w{i}")
        out.frozen.add(f"enc.b{i}")
        out.adapter(i)  # validate shapes
    return out
