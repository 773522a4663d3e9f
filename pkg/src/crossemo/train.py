"""Adam training loop with plateau learning-rate reduction.

A run is deterministic given (config, seed): per-epoch shuffles and dropout
masks are seeded from (seed, epoch), so an epoch-boundary resume replays
exactly the stream a straight run would have produced. Best-validation and
last checkpoints are both kept; the history file records one JSON line per
epoch: {epoch, train_loss, val_ua, val_wa, lr}.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .corpus import CorpusManifest, Fold
from .errors import (
    DivergedLoss,
    EmptyTrainSet,
    ShapeMismatch,
    LeakageError,
    TooFewPerClass,
    ValidationFailure,
)
from .evaluation import confusion_from_predictions, metric_set
from .ioutil import stable_hash64, write_json
from .nn.checkpoint import load_checkpoint, load_into_graph, save_checkpoint
from .nn.models import ModelGraph
from .nn.ops import softmax_cross_entropy


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 1e-4
    batch_size: int = 186
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_patience: int = 4
    plateau_factor: float = 0.8
    plateau_min_delta: float = 1e-6
    lr_floor: float = 1e-7
    validation_fraction: float = 0.1
    seed: int = 0
    early_stop_patience: int | None = None

    def __post_init__(self):
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValidationFailure("plateau_factor must be in (0, 1)")
        if self.plateau_patience < 1:
            raise ValidationFailure("plateau_patience must be >= 1")
        if not 0.0 < self.validation_fraction < 0.5:
            raise ValidationFailure("validation_fraction must be in (0, 0.5)")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValidationFailure("epochs, batch_size, learning_rate must be positive")

    def to_json(self) -> dict:
        return asdict(self)


class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    def __init__(self, params: dict):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0


def adam_step(params: dict, state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """One Adam update from the gradients stored on the parameters.
    Parameters without a gradient this step are left untouched."""
    state.t += 1
    t = state.t
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


@dataclass
class PlateauState:
    lr: float
    best: float = -np.inf
    stall: int = 0


def plateau_update(state: PlateauState, val_metric: float, cfg: TrainConfig) -> PlateauState:
    """Higher-is-better metric. An improvement beyond min_delta resets the
    stall counter; once the counter reaches the patience the learning rate
    is multiplied by the factor (floored at lr_floor) and the counter
    resets. The rate never increases."""
    if val_metric > state.best + cfg.plateau_min_delta:
        return PlateauState(lr=state.lr, best=val_metric, stall=0)
    stall = state.stall + 1
    if stall >= cfg.plateau_patience:
        return PlateauState(
            lr=max(state.lr * cfg.plateau_factor, cfg.lr_floor), best=state.best, stall=0
        )
    return PlateauState(lr=state.lr, best=state.best, stall=stall)


def carve_validation(ids, labels_by_id: dict, fraction: float, seed: int):
    """Class-proportional validation split of the training side. Every class
    contributes at least one utterance to each side."""
    by_class: dict[str, list] = {}
    for utt_id in ids:
        by_class.setdefault(labels_by_id[utt_id], []).append(utt_id)
    fit, val = [], []
    for cls in sorted(by_class):
        members = sorted(by_class[cls])
        if len(members) < 2:
            raise TooFewPerClass(
                f"class {cls!r} has {len(members)} utterance(s); need >= 2 "
                "to carve a validation split"
            )
        n_val = int(round(len(members) * fraction))
        n_val = min(max(n_val, 1), len(members) - 1)
        rng = np.random.default_rng([seed, stable_hash64(cls) % 2**32])
        chosen = set(rng.choice(len(members), size=n_val, replace=False).tolist())
        for i, utt_id in enumerate(members):
            (val if i in chosen else fit).append(utt_id)
    return tuple(fit), tuple(val)


def iter_batches(ids, batch_size: int, rng: np.random.Generator):
    """Seeded shuffle, then contiguous batches; the final short batch is kept."""
    order = np.array(ids, dtype=object)
    rng.shuffle(order)
    for start in range(0, len(order), batch_size):
        yield list(order[start : start + batch_size])


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_val_ua: float
    classes: tuple
    best_checkpoint: str
    last_checkpoint: str
    fit_ids: tuple
    val_ids: tuple


def _leakage_check(manifest: CorpusManifest, fold: Fold) -> None:
    test = set(fold.test_ids)
    for utt_id in test:
        if manifest.get(utt_id).augmented:
            raise LeakageError(f"augmented record {utt_id!r} on the test side")
    for utt_id in fold.train_ids:
        if utt_id in test:
            raise LeakageError(f"{utt_id!r} appears in both train and test")
        record = manifest.get(utt_id)
        if record.augmented and record.source_id in test:
            raise LeakageError(
                f"augmented record {utt_id!r} derives from test utterance "
                f"{record.source_id!r}"
            )


def predict_ids(graph: ModelGraph, store, ids, classes, batch_size: int = 64):
    """Eval-mode argmax predictions: list of (id, predicted, scores)."""
    preds = []
    graph.set_mode("eval")
    for start in range(0, len(ids), batch_size):
        chunk = list(ids[start : start + batch_size])
        logits = graph.forward(store.batch(chunk)).data
        for utt_id, row in zip(chunk, logits):
            preds.append((utt_id, classes[int(np.argmax(row))], row.copy()))
    return preds


def _opt_state_path(out_dir: Path) -> Path:
    return out_dir / "opt_state.npz"


def _save_opt_state(path: Path, adam: AdamState, plateau: PlateauState, epoch: int,
                    best_val: float, best_epoch: int, stagnant: int) -> None:
    arrays = {f"m::{k}": v for k, v in adam.m.items()}
    arrays.update({f"v::{k}": v for k, v in adam.v.items()})
    arrays["meta"] = np.array(
        [adam.t, epoch, plateau.lr, plateau.best, plateau.stall, best_val, best_epoch, stagnant],
        dtype=np.float64,
    )
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def _load_opt_state(path: Path, adam: AdamState):
    data = np.load(path)
    meta = data["meta"]
    for key in data.files:
        if key.startswith("m::"):
            adam.m[key[3:]] = data[key]
        elif key.startswith("v::"):
            adam.v[key[3:]] = data[key]
    adam.t = int(meta[0])
    plateau = PlateauState(lr=float(meta[2]), best=float(meta[3]), stall=int(meta[4]))
    return int(meta[1]), plateau, float(meta[5]), int(meta[6]), int(meta[7])


def train_model(
    graph: ModelGraph,
    manifest: CorpusManifest,
    fold: Fold,
    store,
    cfg: TrainConfig,
    out_dir: str | Path,
    verbose: bool = False,
    resume: bool = False,
) -> TrainResult:
    """Train `graph` on the fold's train side. The fold's test side is only
    consulted by the leakage guard and never enters fitting or validation."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not fold.train_ids:
        raise EmptyTrainSet("fold has no training utterances")
    _leakage_check(manifest, fold)

    labels = manifest.labels_by_id()
    for utt_id in fold.train_ids:
        if labels.get(utt_id) is None:
            raise ValidationFailure(f"record {utt_id!r} has no emotion label")

    originals = tuple(u for u in fold.train_ids if not manifest.get(u).augmented)
    fit_ids, val_ids = carve_validation(
        originals, labels, cfg.validation_fraction, cfg.seed
    )
    val_set = set(val_ids)
    # augmented copies of validation utterances stay out of the fit side
    fit_ids = tuple(fit_ids) + tuple(
        u
        for u in fold.train_ids
        if manifest.get(u).augmented and manifest.get(u).source_id not in val_set
    )

    classes = tuple(sorted({labels[u] for u in fold.train_ids}))
    class_index = {c: i for i, c in enumerate(classes)}

    adam = AdamState(graph.params)
    plateau = PlateauState(lr=cfg.learning_rate)
    history: list = []
    best_val = -np.inf
    best_epoch = 0
    stagnant = 0
    start_epoch = 1

    best_path = str(out_dir / "checkpoint_best.bin")
    last_path = str(out_dir / "checkpoint_last.bin")
    history_path = out_dir / "history.jsonl"
    extra = {"classes": list(classes)}

    if resume and _opt_state_path(out_dir).exists() and Path(last_path).exists():
        data = load_checkpoint(last_path, expect_digest=graph.digest)
        load_into_graph(graph, data)
        last_epoch, plateau, best_val, best_epoch, stagnant = _load_opt_state(
            _opt_state_path(out_dir), adam
        )
        start_epoch = last_epoch + 1
        if history_path.exists():
            with open(history_path, "r", encoding="utf-8") as fh:
                history = [json.loads(line) for line in fh if line.strip()]

    mode = "a" if (resume and start_epoch > 1) else "w"
    with open(history_path, mode, encoding="utf-8") as hist_fh:
        for epoch in range(start_epoch, cfg.epochs + 1):
            rng_shuffle = np.random.default_rng([cfg.seed, epoch, 0])
            rng_dropout = np.random.default_rng([cfg.seed, epoch, 1])
            graph.set_mode("train")
            losses = []
            for batch_ids in iter_batches(fit_ids, cfg.batch_size, rng_shuffle):
                feats = store.batch(batch_ids)
                targets = np.array([class_index[labels[u]] for u in batch_ids])
                graph.zero_grad()
                logits = graph.forward(feats, dropout_rng=rng_dropout)
                loss = softmax_cross_entropy(logits, targets)
                loss_value = float(loss.data)
                if not np.isfinite(loss_value):
                    write_json(
                        out_dir / "diverged_state.json",
                        {"epoch": epoch, "lr": plateau.lr, "batch_ids": batch_ids,
                         "loss": repr(loss_value)},
                    )
                    raise DivergedLoss(
                        f"non-finite loss at epoch {epoch}; state dumped to "
                        f"{out_dir / 'diverged_state.json'}"
                    )
                loss.backward()
                adam_step(graph.params, adam, plateau.lr, cfg)
                losses.append(loss_value)

            preds = predict_ids(graph, store, val_ids, classes)
            pairs = [(labels[u], p) for u, p, _ in preds]
            cm = confusion_from_predictions(pairs, classes)
            metrics = metric_set(cm)
            record = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_ua": metrics.ua_eq1,
                "val_wa": metrics.wa_eq2,
                "lr": plateau.lr,
            }
            history.append(record)
            hist_fh.write(json.dumps(record, sort_keys=True) + "\n")
            hist_fh.flush()
            if verbose and (epoch % 10 == 0 or epoch == 1 or epoch == cfg.epochs):
                print(
                    f"[crossemo] epoch {epoch}: loss {record['train_loss']:.4f} "
                    f"val_ua {record['val_ua']:.2f} lr {record['lr']:.2e}"
                )

            if metrics.ua_eq1 > best_val:
                best_val = metrics.ua_eq1
                best_epoch = epoch
                stagnant = 0
                save_checkpoint(graph, best_path, epoch, extra)
            else:
                stagnant += 1
            plateau = plateau_update(plateau, metrics.ua_eq1, cfg)
            save_checkpoint(graph, last_path, epoch, extra)
            _save_opt_state(
                _opt_state_path(out_dir), adam, plateau, epoch, best_val, best_epoch, stagnant
            )
            if cfg.early_stop_patience is not None and stagnant >= cfg.early_stop_patience:
                break

    return TrainResult(
        history=history,
        best_epoch=best_epoch,
        best_val_ua=float(best_val),
        classes=classes,
        best_checkpoint=best_path,
        last_checkpoint=last_path,
        fit_ids=tuple(fit_ids),
        val_ids=tuple(val_ids),
    )
