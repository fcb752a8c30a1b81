"""BiLSTM knowledge-point tagger with optional label attention and label smoothing.

All functional pieces are batch-first: H is (B, n, k), attention maps are
(B, L, n), pooled text vectors are (B, 2k) and label vectors are (B, L).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from enum import Enum

import numpy as np

from . import tensor as T
from .data import KIND_WORD, Batch
from .nn import LSTMWeights, run_lstm
from .tensor import Tensor

PROB_FLOOR = 1e-12


class ModelError(ValueError):
    """The requested computation does not exist for this variant."""


class Variant(str, Enum):
    BASIC = "Basic"
    LAB = "LAB"
    LBS = "LBS"
    LABS = "LABS"

    @property
    def attention(self) -> bool:
        return self in (Variant.LAB, Variant.LABS)

    @property
    def smoothing(self) -> bool:
        return self in (Variant.LBS, Variant.LABS)


@dataclass
class ModelConfig:
    variant: Variant = Variant.LABS
    vocab_size: int = 72904
    n_labels: int = 427
    embed_dim: int = 300
    hidden_dim: int = 512
    max_len: int = 120
    alpha: float = 4.0
    formula_mode: str = "embed"
    formula_table_rows: int = 1 << 16
    renormalize_pred: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        for name in ("vocab_size", "n_labels", "embed_dim", "hidden_dim", "max_len", "formula_table_rows"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ForwardResult:
    logits: Tensor  # (B, L)
    y_p: Tensor  # (B, L)
    loss: Tensor
    y_c: Tensor | None = None
    y_s: Tensor | None = None
    a_fwd: Tensor | None = None  # (B, L, n)
    a_bwd: Tensor | None = None


# --------------------------------------------------------------------------
# functional components
# --------------------------------------------------------------------------


def _const(arr: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(np.ascontiguousarray(arr, dtype=like.data.dtype))


def embed_tokens(batch: Batch, word_table: Tensor, formula_table: Tensor) -> Tensor:
    """(B, n, d) inputs: word rows for words, mean tuple rows for formulas, zeros for PAD."""
    bsz, n = batch.ids.shape
    d = word_table.shape[1]
    is_word = np.repeat((batch.kinds == KIND_WORD)[:, :, None], d, axis=2)
    x = T.gather_rows(word_table, batch.ids) * _const(is_word, word_table)
    if batch.formula_rows.size:
        f = T.segment_mean(formula_table, batch.formula_rows, batch.formula_slots, bsz * n)
        x = x + T.reshape(f, (bsz, n, d))
    return x


def encode(x: Tensor, mask: np.ndarray, fwd: LSTMWeights, bwd: LSTMWeights) -> tuple[Tensor, Tensor]:
    """BiLSTM over (B, n, d) inputs; returns masked (H_fwd, H_bwd), each (B, n, k)."""
    return run_lstm(x, mask, fwd), run_lstm(x, mask, bwd, reverse=True)


def label_attention(h_fwd: Tensor, h_bwd: Tensor, c_att: Tensor | None, mask: np.ndarray):
    """Sigmoid label-token attention shared by both directions.

    Returns M (B, L, 2k) and the attention maps A_fwd, A_bwd (B, L, n) with
    padded columns forced to zero.
    """
    if c_att is None:
        raise ModelError("label_attention requires the attention label matrix (LAB/LABS variants)")
    bsz, n, k = h_fwd.shape
    n_labels = c_att.shape[0]
    col_mask = _const(np.repeat(mask[:, None, :], n_labels, axis=1), h_fwd)
    maps, pooled = [], []
    for h in (h_fwd, h_bwd):
        scores = T.reshape(T.matmul(T.reshape(h, (bsz * n, k)), T.transpose(c_att)), (bsz, n, n_labels))
        a = T.sigmoid(T.transpose(scores, (0, 2, 1))) * col_mask
        maps.append(a)
        pooled.append(T.matmul(a, h))
    return T.concat(pooled, axis=-1), maps[0], maps[1]


def pool(h_or_m: Tensor, variant: Variant | str, mask: np.ndarray | None = None) -> Tensor:
    """Text vector M' (B, 2k).

    Attention variants average M over its label rows; the others average H
    over unmasked time steps.
    """
    variant = Variant(variant)
    if variant.attention:
        return T.mean(h_or_m, axis=1)
    bsz, n, width = h_or_m.shape
    if mask is None:
        mask = np.ones((bsz, n))
    counts = np.maximum(mask.sum(axis=1), 1.0)
    inv = np.repeat((1.0 / counts)[:, None], width, axis=1)
    masked = h_or_m * _const(np.repeat(mask[:, :, None], width, axis=2), h_or_m)
    return T.sum(masked, axis=1) * _const(inv, h_or_m)


def predict(m_prime: Tensor, w_out: Tensor, b_out: Tensor) -> tuple[Tensor, Tensor]:
    """Per-label sigmoid scores; returns (logits, y_p)."""
    logits = T.add_bias(T.matmul(m_prime, T.transpose(w_out)), b_out)
    return logits, T.sigmoid(logits)


def confusion_distribution(m_prime: Tensor, c_lcm: Tensor | None) -> Tensor:
    if c_lcm is None:
        raise ModelError("confusion_distribution requires the confusion label matrix (LBS/LABS variants)")
    return T.softmax(T.matmul(m_prime, T.transpose(c_lcm)))


def simulate_labels(y_c: Tensor, y_t, alpha: float) -> Tensor:
    """softmax(y_c + alpha * y_t); y_t is a constant multi-hot array."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    y_t = np.asarray(y_t.data if isinstance(y_t, Tensor) else y_t, dtype=y_c.data.dtype)
    return T.softmax(y_c + Tensor(alpha * y_t))


def _batch_mean(per_example: Tensor) -> Tensor:
    return per_example if per_example.ndim == 0 else T.mean(per_example)


def loss_kl(y_s: Tensor, y_p: Tensor, renormalize: bool = False) -> Tensor:
    """sum_l y_s * log(y_s / y_p), averaged over the batch.

    ``y_p`` is clamped to [1e-12, 1 - 1e-12]. By default it is used as is,
    unnormalized; ``renormalize`` divides it by its sum first.
    """
    p = T.clamp(y_p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    if renormalize:
        p = T.normalize(p)
    per = T.sum(y_s * (T.log(y_s) - T.log(p)), axis=-1)
    return _batch_mean(per)


def loss_bce(y_t, y_p: Tensor) -> Tensor:
    """Mean binary cross-entropy over labels, averaged over the batch."""
    y = np.asarray(y_t.data if isinstance(y_t, Tensor) else y_t, dtype=y_p.data.dtype)
    p = T.clamp(y_p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    ones = np.ones_like(y)
    per_label = Tensor(y) * T.log(p) + Tensor(ones - y) * T.log(Tensor(ones) - p)
    per = T.mean(per_label, axis=-1) * -1.0
    return _batch_mean(per)


# --------------------------------------------------------------------------
# the network
# --------------------------------------------------------------------------


class LABSModel:
    """Parameters plus the forward routing for one of the four variants."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "LABSModel":
        rng = np.random.default_rng(seed)
        dtype = np.dtype(config.dtype)
        d, k, L = config.embed_dim, config.hidden_dim, config.n_labels

        def param(arr):
            return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

        word = rng.normal(0.0, 0.1, size=(config.vocab_size, d))
        word[0] = 0.0
        params = {
            "embed.word": param(word),
            "embed.formula": param(rng.normal(0.0, 0.1, size=(config.formula_table_rows, d))),
        }
        for name in ("fwd", "bwd"):
            w = LSTMWeights.init(d, k, rng, dtype)
            params[f"lstm.{name}.w_x"] = w.w_x
            params[f"lstm.{name}.w_h"] = w.w_h
            params[f"lstm.{name}.b"] = w.b
        if config.variant.attention:
            params["attn.C"] = param(rng.uniform(-0.05, 0.05, size=(L, k)))
        if config.variant.smoothing:
            params["lcm.C"] = param(rng.uniform(-0.05, 0.05, size=(L, 2 * k)))
        bound = 1.0 / np.sqrt(2 * k)
        params["out.W"] = param(rng.uniform(-bound, bound, size=(L, 2 * k)))
        params["out.b"] = param(np.zeros(L))
        return cls(config, params)

    def lstm(self, direction: str) -> LSTMWeights:
        p = self.params
        return LSTMWeights(p[f"lstm.{direction}.w_x"], p[f"lstm.{direction}.w_h"], p[f"lstm.{direction}.b"])

    def forward(self, batch: Batch) -> ForwardResult:
        cfg = self.config
        p = self.params
        x = embed_tokens(batch, p["embed.word"], p["embed.formula"])
        h_fwd, h_bwd = encode(x, batch.mask, self.lstm("fwd"), self.lstm("bwd"))
        a_fwd = a_bwd = None
        if cfg.variant.attention:
            m, a_fwd, a_bwd = label_attention(h_fwd, h_bwd, p.get("attn.C"), batch.mask)
            m_prime = pool(m, cfg.variant)
        else:
            m_prime = pool(T.concat([h_fwd, h_bwd], axis=-1), cfg.variant, batch.mask)
        logits, y_p = predict(m_prime, p["out.W"], p["out.b"])
        y_c = y_s = None
        if cfg.variant.smoothing:
            y_c = confusion_distribution(m_prime, p.get("lcm.C"))
            y_s = simulate_labels(y_c, batch.targets, cfg.alpha)
            loss = loss_kl(y_s, y_p, cfg.renormalize_pred)
        else:
            loss = loss_bce(batch.targets, y_p)
        return ForwardResult(logits, y_p, loss, y_c, y_s, a_fwd, a_bwd)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ValueError(f"parameter name mismatch: {sorted(missing)}")
        for name, t in self.params.items():
            if state[name].shape != t.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {t.shape}")
            t.data = np.array(state[name], dtype=t.data.dtype)
