"""Adaptive gated fusion over a frozen expert bank, plus the mean-logit
ensemble baseline.

The gate is a single linear layer on the time-mean of the shared expert's
features; its softmax scores pick the top-k specialists (ties break to the
lowest index). Selected features are weight-summed, the shared features are
added unweighted, and the result is layer-normalized, attention-pooled,
projected, and classified. Only gate/LN/pool/classifier parameters train;
the expert bank is checksum-frozen.

Gate scores are softmaxed over all specialists and not renormalized after
selection (the shared features anchor the scale); `renormalize=True` is
available for ablation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tc
from .audio import AudioClip
from .corpus import resolve_clip, stable_seed
from .experts import (
    CheckpointError,
    ExpertModel,
    FrozenContractError,
    TrainHyper,
    _payload_checksum,
    _read_payload,
    _tensor_payload,
    _tensors_from_payload,
    _write_payload,
    encoder_forward,
    frame_features,
    full_checksum,
    load_adapter_checkpoint,
    load_expert_checkpoint,
)
from .metrics import ScoreSet, compute_eer

LN_EPS = 1e-5


class FusionError(ValueError):
    pass


@dataclass
class GateDecision:
    scores: np.ndarray  # softmax weights over the N specialists
    selected: tuple     # indices of the k largest scores, ascending

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.selected = tuple(int(i) for i in self.selected)


def init_fusion_params(dim: int, n_experts: int, seed: int) -> dict:
    rng = np.random.Generator(np.random.Philox(seed))
    return {
        "gate.w": np.zeros((dim, n_experts)),
        "gate.b": np.zeros((1, n_experts)),
        "ln.g": np.ones((1, dim)),
        "ln.b": np.zeros((1, dim)),
        "pool.a": np.zeros((dim, 1)),
        "pool.proj": np.eye(dim),
        "cls.w1": rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, dim)),
        "cls.b1": np.zeros((1, dim)),
        "cls.w2": np.zeros((dim, 2)),
        "cls.b2": np.zeros((1, 2)),
    }


class FusionSystem:
    """Frozen expert bank [shared, specialists...] plus trainable fusion params."""

    def __init__(self, experts, k: int, params: dict | None = None,
                 renormalize: bool = False, seed: int = 0):
        if len(experts) < 2:
            raise FusionError("fusion needs the shared expert plus at least one specialist")
        dims = {e.cfg.output_dim for e in experts}
        if len(dims) != 1:
            raise FusionError(f"experts disagree on output dim: {sorted(dims)}")
        self.experts = list(experts)
        self.n_specialists = len(experts) - 1
        if not 1 <= k <= self.n_specialists:
            raise FusionError(f"k={k} outside [1, {self.n_specialists}]")
        self.k = k
        self.renormalize = renormalize
        self.dim = experts[0].cfg.output_dim
        self.params = params if params is not None else init_fusion_params(
            self.dim, self.n_specialists, seed)
        self.expert_checksums = [full_checksum(e) for e in self.experts]

    def copy_params(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    def verify_bank(self) -> None:
        current = [full_checksum(e) for e in self.experts]
        if current != self.expert_checksums:
            raise FrozenContractError("expert bank changed under the fusion system")


def gate_scores(z0: np.ndarray, gate_w: np.ndarray, gate_b: np.ndarray, k: int) -> GateDecision:
    """Softmax contribution weights from the shared features' time mean."""
    n = gate_w.shape[1]
    if not 1 <= k <= n:
        raise FusionError(f"k={k} exceeds the {n} available specialists")
    zbar = z0.mean(axis=0, keepdims=True)
    logits = tc.matmul_values(zbar, gate_w) + gate_b
    scores = tc.softmax_values(logits)[0]
    order = np.argsort(-scores, kind="stable")  # ties resolve to the lowest index
    return GateDecision(scores, tuple(sorted(int(i) for i in order[:k])))


def fuse(z_list, z0, decision: GateDecision, ln_gain, ln_bias,
         renormalize: bool = False) -> np.ndarray:
    """Weighted sum of the selected specialists plus unweighted shared features,
    then row-wise layer norm."""
    for z in z_list:
        if z.shape != z0.shape:
            raise tc.ShapeError(f"expert feature shapes disagree: {z.shape} vs {z0.shape}")
    weights = decision.scores
    if renormalize:
        total = 0.0
        for i in decision.selected:
            total = total + float(weights[i])
        if total > 0.0:
            weights = weights * (1.0 / total)
    acc = np.zeros_like(z0)
    for i in decision.selected:
        acc = acc + weights[i] * z_list[i]
    out, _, _ = tc.layer_norm_values(acc + z0, ln_gain, ln_bias, LN_EPS)
    return out


def head_forward(z_moe: np.ndarray, params: dict) -> np.ndarray:
    """Attention pooling over time, projection, two-layer tanh classifier."""
    att = tc.matmul_values(z_moe, params["pool.a"])  # T x 1
    weights = tc.softmax_values(att.T)               # 1 x T
    pooled = tc.matmul_values(weights, z_moe)        # 1 x D
    proj = tc.matmul_values(pooled, params["pool.proj"])
    hidden = np.tanh(tc.matmul_values(proj, params["cls.w1"]) + params["cls.b1"])
    return tc.matmul_values(hidden, params["cls.w2"]) + params["cls.b2"]


def expert_features(system: FusionSystem, clip: AudioClip) -> list:
    feats = frame_features(clip, system.experts[0].cfg)
    return [encoder_forward(e, feats) for e in system.experts]


def fused_logits(system: FusionSystem, z_all, zero_gate: bool = False):
    """Gate + fuse + head on precomputed per-expert features [z0, z1, ...]."""
    decision = gate_scores(z_all[0], system.params["gate.w"], system.params["gate.b"], system.k)
    if zero_gate:
        decision = GateDecision(np.zeros_like(decision.scores), decision.selected)
    fused = fuse(z_all[1:], z_all[0], decision, system.params["ln.g"],
                 system.params["ln.b"], system.renormalize)
    return decision, head_forward(fused, system.params)


def predict(system: FusionSystem, clip: AudioClip, zero_gate: bool = False) -> float:
    """Bona-fide-positive score: logit(bonafide) - logit(spoof)."""
    _, logits = fused_logits(system, expert_features(system, clip), zero_gate)
    return float(logits[0, 0] - logits[0, 1])


def ensemble_logits(per_expert_logits) -> np.ndarray:
    """Elementwise mean of per-expert logit rows (shared expert included)."""
    rows = [np.asarray(row, dtype=np.float64).reshape(-1) for row in per_expert_logits]
    if not rows:
        raise FusionError("ensemble needs at least one expert's logits")
    acc = np.zeros_like(rows[0])
    for row in rows:
        if row.shape != acc.shape:
            raise FusionError("ensemble logits disagree in shape")
        acc = acc + row
    return acc / len(rows)


# --- fusion training ---------------------------------------------------------


def _fusion_loss_nodes(system, leaves, z_all, label_idx: int) -> tc.Node:
    z0 = z_all[0]
    zbar = tc.constant(z0.mean(axis=0, keepdims=True))
    glogits = tc.add(tc.matmul(zbar, leaves["gate.w"]), leaves["gate.b"])
    scores = tc.softmax_rows(glogits)
    order = np.argsort(-scores.value[0], kind="stable")
    selected = sorted(int(i) for i in order[: system.k])

    picked = {i: tc.pick(scores, i) for i in selected}
    if system.renormalize:
        total = None
        for i in selected:
            total = picked[i] if total is None else tc.add(total, picked[i])
        inv = tc.srecip(total)
        picked = {i: tc.smul(picked[i], inv) for i in selected}

    acc = None
    for i in selected:
        term = tc.smul(tc.constant(z_all[1 + i]), picked[i])
        acc = term if acc is None else tc.add(acc, term)
    fused = tc.layer_norm(tc.add(acc, tc.constant(z0)), leaves["ln.g"], leaves["ln.b"], LN_EPS)

    att = tc.matmul(fused, leaves["pool.a"])
    weights = tc.softmax_rows(tc.transpose(att))
    pooled = tc.matmul(weights, fused)
    proj = tc.matmul(pooled, leaves["pool.proj"])
    hidden = tc.tanh(tc.add(tc.matmul(proj, leaves["cls.w1"]), leaves["cls.b1"]))
    logits = tc.add(tc.matmul(hidden, leaves["cls.w2"]), leaves["cls.b2"])
    return tc.cross_entropy(logits, label_idx)


def _system_dev_eer(system: FusionSystem, dev_features, dev_labels) -> float:
    bona, spoof = [], []
    for z_all, label in zip(dev_features, dev_labels):
        _, logits = fused_logits(system, z_all)
        score = float(logits[0, 0] - logits[0, 1])
        (bona if label == "bonafide" else spoof).append(score)
    return compute_eer(ScoreSet(bona, spoof)).eer


def train_fusion(
    system: FusionSystem,
    subset_manifest,
    dev_entries,
    root,
    hyper: TrainHyper,
    seed: int,
    log=None,
) -> list:
    """Train gate/LN/pool/classifier on the sampled fusion subset.

    Expert tensors are barred from the graph entirely and checksum-verified
    before and after; selection indices are constants within a step, so
    gradients reach the selected scores only.
    """
    from .experts import LABEL_INDEX

    system.verify_bank()

    def cache(entries):
        features, labels = [], []
        for entry in entries:
            clip = resolve_clip(entry, root)
            features.append(expert_features(system, clip))
            labels.append(entry.label)
        return features, labels

    train_features, train_labels = cache(subset_manifest.entries)
    dev_features, dev_labels = cache(dev_entries)

    lr = hyper.lr
    best_params = system.copy_params()
    best_eer = float("inf")
    plateau = 0
    stall = 0
    history = []

    for epoch in range(hyper.max_epochs):
        shuffle_rng = np.random.Generator(np.random.Philox(stable_seed(seed, "shuffle", epoch)))
        order = shuffle_rng.permutation(len(train_features))
        epoch_loss = 0.0
        for start in range(0, len(order), hyper.batch_size):
            batch = order[start : start + hyper.batch_size]
            leaves = {
                name: tc.Node(value, requires_grad=True)
                for name, value in system.params.items()
            }
            total = None
            for idx in batch:
                loss = _fusion_loss_nodes(
                    system, leaves, train_features[idx], LABEL_INDEX[train_labels[idx]]
                )
                total = loss if total is None else tc.add(total, loss)
            batch_loss = tc.scale(total, 1.0 / len(batch))
            tc.backward(batch_loss)
            for name, node in leaves.items():
                system.params[name] = system.params[name] - lr * node.grad
            epoch_loss += float(batch_loss.value[0, 0]) * len(batch)
        epoch_loss /= len(train_features)
        eer = _system_dev_eer(system, dev_features, dev_labels)
        history.append({"epoch": epoch, "loss": epoch_loss, "dev_eer": eer, "lr": lr})
        if log is not None:
            log(f"epoch={epoch} loss={epoch_loss:.6f} dev_eer={eer:.4f} lr={lr:.2e}")
        if eer < best_eer:
            best_eer = eer
            best_params = system.copy_params()
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

    system.params = best_params
    system.verify_bank()
    return history


# --- fusion checkpoint -------------------------------------------------------


def save_fusion_checkpoint(system: FusionSystem, path, expert_refs) -> str:
    """`expert_refs` are (relative path, content checksum) pairs, shared first."""
    payload = {
        "format": "fusion-checkpoint",
        "version": 1,
        "k": system.k,
        "renormalize": system.renormalize,
        "tensors": _tensor_payload(system.params, system.params),
        "experts": [{"path": str(p), "checksum": c} for p, c in expert_refs],
    }
    return _write_payload(payload, path)


def load_fusion_checkpoint(path, root) -> FusionSystem:
    payload = _read_payload(path, "fusion-checkpoint")
    refs = payload["experts"]
    if not refs:
        raise CheckpointError(f"{path}: fusion checkpoint lists no experts")

    def verify(ref) -> str:
        ckpt_path = Path(root) / ref["path"]
        stored = json.loads(ckpt_path.read_text())
        actual = _payload_checksum({k: v for k, v in stored.items() if k != "checksum"})
        if actual != ref["checksum"]:
            raise CheckpointError(f"{ckpt_path}: checksum does not match the fusion binding")
        return ckpt_path

    shared = load_expert_checkpoint(verify(refs[0]))
    experts = [shared]
    for ref in refs[1:]:
        experts.append(load_adapter_checkpoint(verify(ref), shared))
    params = _tensors_from_payload(payload["tensors"])
    return FusionSystem(experts, payload["k"], params, payload["renormalize"])
