"""Mini-batch Adam training with early stopping, and the four-variant ablation."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_params, save_params
from .data import (
    Encoder,
    EncodedExample,
    Example,
    Vocabulary,
    build_vocabulary,
    collate,
    split,
    split_manifest,
)
from .mathtext import FormulaMode, Segmenter
from .metrics import KS, MetricReport, evaluate, true_sets_from_targets
from .model import LABSModel, ModelConfig, Variant

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Non-finite loss or gradient norm; batch 0 means the validation pass."""

    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"training diverged ({value}) at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 512
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ValueError(f"invalid training config: {self}")


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    """Bias-corrected Adam update, in place on ``params`` (name -> ndarray or Tensor)."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params.items():
        arr = p.data if isinstance(p, T.Tensor) else p
        g = grads[name]
        if g.shape != arr.shape:
            raise T.ShapeError(f"adam_step: {name} has shape {arr.shape} but gradient {g.shape}")
        m = state.m.setdefault(name, np.zeros_like(arr))
        v = state.v.setdefault(name, np.zeros_like(arr))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        arr -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``; return the raw norm."""
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
    if max_norm > 0 and np.isfinite(norm) and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


# --------------------------------------------------------------------------
# records
# --------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_metrics: dict[str, float]


@dataclass
class RunRecord:
    variant: str
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stop_epoch: int = 0
    wall_time: float = 0.0
    clip_events: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")

    def write_curve_csv(self, path) -> None:
        lines = ["epoch,train_loss,val_loss"]
        lines += [f"{e.epoch},{e.train_loss!r},{e.val_loss!r}" for e in self.epochs]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class EarlyStopping:
    """Stop once validation loss has not strictly improved for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0

    def update(self, epoch: int, loss: float) -> tuple[bool, bool]:
        """Return (improved, should_stop)."""
        if loss < self.best:
            self.best, self.best_epoch = loss, epoch
            return True, False
        return False, epoch - self.best_epoch >= self.patience


# --------------------------------------------------------------------------
# training and evaluation
# --------------------------------------------------------------------------


@dataclass
class Predictions:
    loss: float
    logits: np.ndarray
    scores: np.ndarray
    targets: np.ndarray

    def metrics(self, ks=KS) -> MetricReport:
        ks = [k for k in ks if k <= self.logits.shape[1]]
        return evaluate(self.logits, true_sets_from_targets(self.targets), ks)


def _batches(n: int, batch_size: int, order=None):
    order = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def predict_split(model: LABSModel, items: Sequence[EncodedExample], batch_size: int = 256) -> Predictions:
    """Forward pass without graph construction; ranking uses the logits."""
    logits, scores, targets = [], [], []
    total = 0.0
    with T.no_grad():
        for idx in _batches(len(items), batch_size):
            batch = collate([items[i] for i in idx])
            out = model.forward(batch)
            total += out.loss.item() * len(idx)
            logits.append(out.logits.data)
            scores.append(out.y_p.data)
            targets.append(batch.targets)
    return Predictions(total / max(len(items), 1), np.concatenate(logits), np.concatenate(scores), np.concatenate(targets))


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_items: Sequence[EncodedExample],
    val_items: Sequence[EncodedExample],
) -> tuple[LABSModel, RunRecord]:
    """Train one variant; returns the best-validation-loss parameters."""
    start = time.perf_counter()
    model = LABSModel.init(model_config, train_config.seed)
    record = RunRecord(model_config.variant.value)
    rng = np.random.default_rng(train_config.seed)
    state = AdamState()
    stopper = EarlyStopping(train_config.patience)
    best_state = model.state_dict()
    names = list(model.params)
    for epoch in range(1, train_config.max_epochs + 1):
        seen, running = 0, 0.0
        for b, idx in enumerate(_batches(len(train_items), train_config.batch_size, rng.permutation(len(train_items))), 1):
            batch = collate([train_items[i] for i in idx])
            out = model.forward(batch)
            loss = out.loss.item()
            if not np.isfinite(loss):
                raise DivergenceError(epoch, b, loss)
            T.backward(out.loss)
            grads = {n: model.params[n].grad for n in names}
            norm = clip_global_norm(grads, train_config.clip_norm)
            if not np.isfinite(norm):
                raise DivergenceError(epoch, b, norm)
            if norm > train_config.clip_norm:
                record.clip_events += 1
                log.debug("clipped gradient at epoch %d batch %d", epoch, b)
            adam_step(model.params, grads, state, train_config.learning_rate)
            running += loss * len(idx)
            seen += len(idx)
        val = predict_split(model, val_items)
        if not np.isfinite(val.loss):
            raise DivergenceError(epoch, 0, val.loss)
        record.epochs.append(EpochRecord(epoch, running / max(seen, 1), val.loss, val.metrics().to_dict()))
        log.info("%s epoch %d train %.5f val %.5f", record.variant, epoch, running / max(seen, 1), val.loss)
        improved, stop = stopper.update(epoch, val.loss)
        if improved:
            best_state = model.state_dict()
        record.stop_epoch = epoch
        if stop:
            break
    record.best_epoch = stopper.best_epoch
    model.load_state_dict(best_state)
    record.wall_time = time.perf_counter() - start
    return model, record


# --------------------------------------------------------------------------
# datasets and bundles
# --------------------------------------------------------------------------


@dataclass
class Prepared:
    encoder: Encoder
    train: list[EncodedExample]
    val: list[EncodedExample]
    test: list[EncodedExample]
    raw_test: list[Example]
    manifest: dict


def prepare(
    examples: Sequence[Example],
    seed: int,
    mode: FormulaMode | str = FormulaMode.EMBED,
    max_len: int = 120,
    formula_table_rows: int = 1 << 16,
    lexicon: Sequence[str] | None = None,
) -> Prepared:
    """Split, derive the segmenter lexicon and vocabulary from train, encode all splits."""
    train_ex, val_ex, test_ex = split(examples, seed)
    segmenter = Segmenter(lexicon) if lexicon is not None else Segmenter.from_corpus(ex.text for ex in train_ex)
    vocab = build_vocabulary(train_ex, examples, segmenter, mode)
    encoder = Encoder(vocab, segmenter, mode, max_len, formula_table_rows)
    manifest = split_manifest(train_ex, val_ex, test_ex, seed)
    return Prepared(
        encoder,
        encoder.encode_all(train_ex),
        encoder.encode_all(val_ex),
        encoder.encode_all(test_ex),
        list(test_ex),
        manifest,
    )


def model_config_for(base: ModelConfig, encoder: Encoder, variant: Variant | str | None = None) -> ModelConfig:
    cfg = dataclasses.replace(base)
    cfg.vocab_size = len(encoder.vocab)
    cfg.n_labels = encoder.vocab.n_labels
    cfg.max_len = encoder.max_len
    cfg.formula_mode = encoder.mode.value
    cfg.formula_table_rows = encoder.formula_table_rows
    if variant is not None:
        cfg.variant = Variant(variant)
    return cfg


def save_bundle(directory, model: LABSModel, encoder: Encoder, manifest: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_params(directory / "params.labs", model.state_dict())
    (directory / "model.json").write_text(json.dumps(model.config.to_dict(), indent=2) + "\n", encoding="utf-8")
    encoder.vocab.save(directory)
    lexicon = sorted(encoder.segmenter.lexicon)
    (directory / "lexicon.txt").write_text("".join(w + "\n" for w in lexicon), encoding="utf-8")
    if manifest is not None:
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def load_bundle(directory) -> tuple[LABSModel, Encoder]:
    directory = Path(directory)
    config = ModelConfig.from_dict(json.loads((directory / "model.json").read_text(encoding="utf-8")))
    vocab = Vocabulary.load(directory)
    lexicon = (directory / "lexicon.txt").read_text(encoding="utf-8").split()
    encoder = Encoder(vocab, Segmenter(lexicon), config.formula_mode, config.max_len, config.formula_table_rows)
    model = LABSModel.init(config, 0)
    model.load_state_dict(load_params(directory / "params.labs"))
    return model, encoder


# --------------------------------------------------------------------------
# ablation
# --------------------------------------------------------------------------


@dataclass
class AblationResult:
    records: dict[str, RunRecord]
    test_metrics: dict[str, MetricReport]
    manifest: dict
    models: dict[str, LABSModel] = field(default_factory=dict, repr=False)

    def table(self) -> dict:
        """Table of metric rows by variant columns, plus epochs-to-stop."""
        variants = list(self.test_metrics)
        rows = {}
        for row in MetricReport.ROWS:
            rows[row] = {v: self.test_metrics[v].to_dict().get(row) for v in variants}
        return {
            "columns": variants,
            "rows": rows,
            "stop_epochs": {v: self.records[v].stop_epoch for v in variants},
            "best_epochs": {v: self.records[v].best_epoch for v in variants},
            "manifest": self.manifest,
        }

    def table_json(self) -> str:
        return json.dumps(self.table(), indent=2, sort_keys=False) + "\n"

    def table_text(self) -> str:
        variants = list(self.test_metrics)
        width = max(len(r) for r in MetricReport.ROWS) + 2
        lines = ["Evaluation".ljust(width) + "".join(v.rjust(10) for v in variants)]
        for row in MetricReport.ROWS:
            vals = [self.test_metrics[v].to_dict().get(row) for v in variants]
            lines.append(row.ljust(width) + "".join(("-" if x is None else f"{100 * x:.2f}%").rjust(10) for x in vals))
        lines.append("Stop epoch".ljust(width) + "".join(str(self.records[v].stop_epoch).rjust(10) for v in variants))
        return "\n".join(lines) + "\n"


def run_ablation(
    prepared: Prepared,
    base: ModelConfig,
    train_config: TrainConfig,
    variants: Sequence[Variant | str] = tuple(Variant),
) -> AblationResult:
    """Train every variant on identical splits and seed; evaluate each on the test split."""
    records, reports, models = {}, {}, {}
    for variant in variants:
        cfg = model_config_for(base, prepared.encoder, variant)
        model, record = train(cfg, train_config, prepared.train, prepared.val)
        name = cfg.variant.value
        records[name] = record
        reports[name] = predict_split(model, prepared.test).metrics()
        models[name] = model
    return AblationResult(records, reports, prepared.manifest, models)
