"""Weighted-average model ensembling on the probability simplex.

Members contribute pre-softmax scores; the ensemble output is
``softmax(sum_i w_i * scores_i)`` with the weight vector ``w`` living on the
probability simplex. Weights are parametrized as softmax(logits) so that any
real-valued logit vector maps to a valid ``w``, and are fitted by Adam on the
validation cross-entropy while every member stays frozen.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import DTYPE, Parameter, Tensor, no_grad
from .blocks import load_checkpoint, model_checksum
from .optim import AdamState, adam_step, categorical_cross_entropy

MANIFEST_VERSION = 1
SIMPLEX_TOL = 1e-9


def _softmax_vec(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


class EnsembleWeights:
    """A simplex weight vector stored as unconstrained logits."""

    def __init__(self, logits):
        logits = np.asarray(logits, dtype=DTYPE)
        if logits.ndim != 1 or logits.size < 1:
            raise ValueError("weight logits must be a non-empty 1-D vector")
        if not np.all(np.isfinite(logits)):
            raise ValueError("weight logits must be finite")
        self.logits = logits

    @classmethod
    def uniform(cls, n_members: int) -> "EnsembleWeights":
        return cls(np.zeros(int(n_members), dtype=DTYPE))

    @classmethod
    def from_weights(cls, weights) -> "EnsembleWeights":
        w = np.asarray(weights, dtype=DTYPE)
        if w.ndim != 1 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
            raise ValueError("weights must be a 1-D vector on the simplex")
        # log(0) is avoided by flooring; an exact zero becomes a weight so
        # small (~1e-300) that it cannot move a sum by even one ulp.
        return cls(np.log(np.maximum(w, 1e-300)))

    @property
    def n_members(self) -> int:
        return self.logits.size

    @property
    def weights(self) -> np.ndarray:
        return _softmax_vec(self.logits)

    def check_simplex(self, tol: float = SIMPLEX_TOL) -> None:
        w = self.weights
        if np.any(w < 0) or abs(float(w.sum()) - 1.0) > tol:
            raise RuntimeError(
                f"weights left the probability simplex: sum={w.sum()!r}, min={w.min()!r}")

    def __repr__(self) -> str:
        return f"EnsembleWeights({np.round(self.weights, 4).tolist()})"


def ensemble_forward(member_scores: Sequence, weights) -> Tensor:
    """Combine per-member pre-softmax scores into ensemble probabilities.

    ``weights`` is a plain 1-D vector (one entry per member); members are
    summed in the order given. A one-hot weight vector reproduces the
    corresponding member's softmax output exactly.
    """
    scores = [s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=DTYPE))
              for s in member_scores]
    w = np.asarray(weights, dtype=DTYPE).reshape(-1)
    if len(scores) == 0:
        raise ValueError("ensemble_forward needs at least one member")
    if w.size != len(scores):
        raise ValueError(f"got {len(scores)} member scores but {w.size} weights")
    shape = scores[0].shape
    for i, s in enumerate(scores):
        if s.shape != shape:
            raise ValueError(
                f"member {i} produced scores of shape {s.shape}, expected {shape}")
    combined = T.scale(scores[0], float(w[0]))
    for i in range(1, len(scores)):
        combined = T.add(combined, T.scale(scores[i], float(w[i])))
    return T.softmax(combined)


class EnsembleModel:
    """A weighted average of at least two frozen member models.

    Exposes the same ``scores``/``forward`` surface as a single model, so the
    evaluation helpers accept either interchangeably.
    """

    def __init__(self, members: Sequence, weights: EnsembleWeights | None = None):
        members = list(members)
        if len(members) < 2:
            raise ValueError(f"ensemble requires >= 2 members, got {len(members)}")
        k = members[0].num_classes
        for i, m in enumerate(members):
            if m.num_classes != k:
                raise ValueError(
                    f"member {i} has {m.num_classes} classes, member 0 has {k}")
        if weights is None:
            weights = EnsembleWeights.uniform(len(members))
        if weights.n_members != len(members):
            raise ValueError(
                f"{len(members)} members but {weights.n_members} weights")
        self.members = members
        self.weights = weights

    @property
    def num_classes(self) -> int:
        return self.members[0].num_classes

    def member_scores(self, x, train: bool = False) -> list[Tensor]:
        return [m.scores(x, train) for m in self.members]

    def scores(self, x, train: bool = False) -> Tensor:
        w = self.weights.weights
        parts = self.member_scores(x, train)
        combined = T.scale(parts[0], float(w[0]))
        for i in range(1, len(parts)):
            combined = T.add(combined, T.scale(parts[i], float(w[i])))
        return combined

    def forward(self, x, train: bool = False) -> Tensor:
        return T.softmax(self.scores(x, train))


@dataclass
class WeightFitConfig:
    """Settings for fitting ensemble weights on a held-out set."""

    steps: int = 300
    lr: float = 0.05
    batch_size: int = 256

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


def _cached_scores(member, x: np.ndarray, batch_size: int) -> np.ndarray:
    chunks = []
    with no_grad():
        for start in range(0, x.shape[0], batch_size):
            chunks.append(member.scores(x[start:start + batch_size]).data)
    return np.concatenate(chunks, axis=0)


def fit_weights(ensemble: EnsembleModel, val_data, config: WeightFitConfig | None = None):
    """Fit the ensemble's weight logits by Adam on validation cross-entropy.

    Member parameters are never touched; their checksums are verified before
    and after fitting. Member scores on the validation set are computed once
    and reused for every step. Returns the per-step history; each row holds
    the loss and weights after that step's update (row 0 is the initial
    state).
    """
    config = config or WeightFitConfig()
    x, y = val_data
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=DTYPE)
    if x.shape[0] == 0:
        raise ValueError("validation set is empty")
    if y.shape != (x.shape[0], ensemble.num_classes):
        raise ValueError(
            f"labels of shape {y.shape} do not match {x.shape[0]} samples "
            f"with {ensemble.num_classes} classes")

    before = [model_checksum(m) for m in ensemble.members]
    scores = [_cached_scores(m, x, config.batch_size) for m in ensemble.members]
    m_samples = x.shape[0]

    def loss_at(w: np.ndarray) -> tuple[float, np.ndarray]:
        combined = sum(w[i] * scores[i] for i in range(len(scores)))
        shifted = np.exp(combined - combined.max(axis=1, keepdims=True))
        probs = shifted / shifted.sum(axis=1, keepdims=True)
        return categorical_cross_entropy(probs, y)[0], probs

    param = Parameter("ensemble/logits", ensemble.weights.logits.copy())
    state = AdamState(lr=config.lr)
    loss, _ = loss_at(_softmax_vec(param.data))
    history = [{"step": 0, "loss": loss,
                "weights": _softmax_vec(param.data).copy()}]
    for step in range(1, config.steps + 1):
        w = _softmax_vec(param.data)
        _, probs = loss_at(w)
        # d loss / d combined for softmax + cross-entropy, then chain through
        # the weighted sum and the softmax over logits.
        dcombined = (probs - y) / m_samples
        dw = np.array([np.vdot(dcombined, s) for s in scores], dtype=DTYPE)
        param.value.grad = w * (dw - float(np.dot(w, dw)))
        adam_step([param], state)
        param.zero_grad()

        ensemble.weights.logits = param.data.copy()
        ensemble.weights.check_simplex()
        loss, _ = loss_at(ensemble.weights.weights)
        history.append({"step": step, "loss": loss,
                        "weights": ensemble.weights.weights.copy()})

    after = [model_checksum(m) for m in ensemble.members]
    if after != before:
        changed = [i for i, (a, b) in enumerate(zip(after, before)) if a != b]
        raise RuntimeError(f"member parameters changed during weight fitting: {changed}")
    return history


def report_weights(names: Sequence[str], weights: EnsembleWeights) -> str:
    """Render a two-column member/weight table with two-decimal weights."""
    names = list(names)
    if len(names) != weights.n_members:
        raise ValueError(f"{len(names)} names for {weights.n_members} weights")
    width = max(len("member"), *(len(n) for n in names)) + 2
    lines = [f"{'member':<{width}}weight"]
    for name, w in zip(names, weights.weights):
        lines.append(f"{name:<{width}}{w:.2f}")
    return "\n".join(lines) + "\n"


def parse_weights(text: str) -> dict[str, float]:
    """Invert report_weights up to the two-decimal rounding."""
    rows = {}
    lines = [ln for ln in text.splitlines() if ln.strip()]
    for line in lines[1:]:
        name, value = line.rsplit(None, 1)
        rows[name.strip()] = float(value)
    return rows


def write_manifest(path, member_paths: Sequence[str], weights: EnsembleWeights,
                   checksums: Sequence[str]) -> None:
    """Write a versioned JSON manifest tying checkpoints to fitted weights."""
    member_paths = [str(p) for p in member_paths]
    checksums = [str(c) for c in checksums]
    if not (len(member_paths) == len(checksums) == weights.n_members):
        raise ValueError("member paths, checksums and weights disagree on count")
    doc = {
        "version": MANIFEST_VERSION,
        "members": [{"path": p, "checksum": c}
                    for p, c in zip(member_paths, checksums)],
        "logits": [float(z) for z in weights.logits],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict) or doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version in {path}")
    members = doc.get("members")
    logits = doc.get("logits")
    if not isinstance(members, list) or not isinstance(logits, list):
        raise ValueError(f"malformed manifest {path}")
    if len(members) != len(logits):
        raise ValueError(f"manifest {path}: {len(members)} members, {len(logits)} logits")
    return doc


def load_ensemble(path) -> EnsembleModel:
    """Rebuild an ensemble from a manifest, verifying member checksums."""
    base = Path(path).parent
    doc = read_manifest(path)
    members = []
    for i, entry in enumerate(doc["members"]):
        member_path = Path(entry["path"])
        if not member_path.is_absolute():
            member_path = base / member_path
        model = load_checkpoint(member_path)
        found = model_checksum(model)
        if found != entry["checksum"]:
            raise RuntimeError(
                f"member {i} ({member_path}) checksum mismatch: "
                f"manifest has {entry['checksum'][:12]}.., file gives {found[:12]}..")
        members.append(model)
    return EnsembleModel(members, EnsembleWeights(doc["logits"]))
