"""Training loop, validation, early stopping and the per-run experiment log."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .annotations import LabeledSegment, balanced_sampler
from .augment import AugmentationChain
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ResolvedConfig, dump_text
from .data import DataBundle, build_data
from .metrics import Metrics, compute_metrics, one_vs_rest
from .nn import ModelSpec, backward, build_model, forward, softmax, softmax_cross_entropy
from .nn.functional import log_softmax
from .nn.models import Model
from .optim import make_state, scheduler_step, set_trainable, state_to_arrays, step, zero_grad

log = logging.getLogger(__name__)

RUNS_ENV = "CALLPIPE_RUNS_DIR"
EVAL_BATCH = 64

# offsets added to experiment.manual_seed for each random stream
SEED_MODEL, SEED_SAMPLER, SEED_AUGMENT, SEED_SPLIT = 1, 2, 3, 4


class TrainingError(RuntimeError):
    pass


def runs_root(default: str | Path = "runs") -> Path:
    return Path(os.environ.get(RUNS_ENV) or default)


def resolve_run_id(value: Any) -> str:
    if value is None or str(value) in ("", "auto"):
        return time.strftime("%Y%m%d-%H%M%S") + f"-{os.getpid()}"
    return str(value)


def make_run_dir(root: str | Path, run_id: str) -> Path:
    path = Path(root) / run_id
    n = 1
    while path.exists():
        path = Path(root) / f"{run_id}.{n}"
        n += 1
    path.mkdir(parents=True)
    return path


def write_config_snapshot(tree: Mapping[str, Any], run_dir: str | Path) -> Path:
    path = Path(run_dir) / "config.yaml"
    path.write_text(dump_text(dict(tree)), encoding="utf-8")
    return path


def model_spec_from_config(model_cfg: Mapping[str, Any], num_classes: int,
                           input_shape: tuple[int, int, int]) -> ModelSpec:
    return ModelSpec(
        architecture=str(model_cfg.get("architecture", "resnet_tiny")),
        num_classes=num_classes,
        input_shape=input_shape,
        use_pcen_frontend=bool(model_cfg.get("use_pcen_frontend", False)),
        width=int(model_cfg.get("width", 16)),
        hidden=int(model_cfg.get("hidden", 128)),
        pcen_groups=int(model_cfg.get("pcen_groups", 1)),
        pcen={k: float(v) for k, v in dict(model_cfg.get("pcen", {})).items()},
    )


def positive_scores(probs: np.ndarray) -> np.ndarray:
    """Binary detection score: probability of anything but class 0."""
    return 1.0 - probs[:, 0]


def batch_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    class_index: np.ndarray
    probs: np.ndarray
    loss: float
    metrics: Metrics
    per_class: dict[str, dict[str, float]]


def predict_batches(model: Model, inputs: Sequence[np.ndarray], batch_size: int = EVAL_BATCH) -> np.ndarray:
    """Eval-mode logits for a sequence of ``[1, F, T]`` inputs, in order."""
    out = []
    for i in range(0, len(inputs), batch_size):
        x = np.stack(inputs[i:i + batch_size]).astype(model.dtype)
        out.append(forward(model, x, "eval").data.astype(np.float64))
    if not out:
        return np.zeros((0, model.spec.num_classes))
    return np.concatenate(out)


def summarize(class_index: np.ndarray, logits: np.ndarray, class_names: Sequence[str],
              threshold: float) -> EvalResult:
    probs = softmax(logits)
    labels = (class_index != 0).astype(int)
    loss = batch_loss(logits, class_index)
    metrics = compute_metrics(labels, positive_scores(probs), threshold, loss)
    return EvalResult(class_index, probs, loss, metrics, one_vs_rest(class_index, probs, class_names, threshold))


def evaluate(model: Model, data: DataBundle, segments: Sequence[LabeledSegment],
             threshold: float = 0.5, batch_size: int = EVAL_BATCH) -> EvalResult:
    """Eval-mode pass over ``segments`` in the given order; the model is not modified."""
    if not segments:
        raise TrainingError("cannot evaluate an empty segment set")
    inputs = [data.preprocessor(data.wave(s)).values[None] for s in segments]
    logits = predict_batches(model, inputs, batch_size)
    idx = np.array([s.class_index for s in segments], dtype=np.int64)
    return summarize(idx, logits, data.class_names, threshold)


# ---------------------------------------------------------------------------
# Experiment log
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train: dict[str, float]
    val: dict[str, float]
    val_per_class: dict[str, dict[str, float]]
    started: float
    finished: float

    def to_json(self) -> str:
        return json.dumps({"epoch": self.epoch, "lr": self.lr, "train": self.train, "val": self.val,
                           "val_per_class": self.val_per_class, "started": self.started,
                           "finished": self.finished}, sort_keys=True)


@dataclass
class ExperimentRecord:
    run_id: str
    config: dict[str, Any]
    epochs: list[EpochRecord] = field(default_factory=list)
    log_path: Path | None = None

    def append(self, rec: EpochRecord) -> None:
        self.epochs.append(rec)
        if self.log_path is not None:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(rec.to_json() + "\n")

    def series(self, split: str, key: str) -> list[float]:
        return [getattr(e, split)[key] for e in self.epochs]


def read_log(path: str | Path) -> list[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# Training session
# ---------------------------------------------------------------------------


class Trainer:
    """One training run; drive it with :meth:`run` or epoch by epoch."""

    def __init__(self, config: ResolvedConfig | Mapping[str, Any], data: DataBundle | None = None,
                 run_dir: str | Path | None = None, init: Checkpoint | None = None,
                 finetune_mode: str | None = None):
        self.tree = dict(config.tree if isinstance(config, ResolvedConfig) else config)
        cfg = self.tree
        self.seed = int(cfg["experiment"].get("manual_seed", 0))
        self.data = data if data is not None else build_data(cfg["data"], cfg["preprocessors"],
                                                             self.seed + SEED_SPLIT)
        if not self.data.train or not self.data.val:
            raise TrainingError("train and val splits must be non-empty")
        self.class_names = self.data.class_names
        self.threshold = float(cfg["experiment"].get("threshold", 0.5))
        self.batch_size = int(cfg["data"].get("batch_size", 32))
        optim_cfg = cfg["optim"]
        self.max_epochs = int(optim_cfg.get("epochs", 100))
        self.patience = int(optim_cfg.get("patience", 10))

        if init is not None:
            if list(init.class_names) != self.class_names:
                raise TrainingError(f"checkpoint classes {init.class_names} differ from data classes {self.class_names}")
            if tuple(init.spec.input_shape) != self.data.input_shape():
                raise TrainingError(f"checkpoint input shape {init.spec.input_shape} differs from "
                                    f"preprocessed data shape {self.data.input_shape()}")
            self.model = init.build()
        else:
            spec = model_spec_from_config(cfg["model"], len(self.class_names), self.data.input_shape())
            self.model = build_model(spec, self.seed + SEED_MODEL)
        set_trainable(self.model, finetune_mode or "all")
        self.params = self.model.parameters()
        self.opt = make_state(optim_cfg)
        aug_p = float(cfg["data"].get("train_dataset", {}).get("augmentations_p", 1.0))
        self.chain = AugmentationChain.from_config(cfg.get("augmentations", {}), aug_p)
        self.aug_rng = np.random.default_rng(self.seed + SEED_AUGMENT)
        self.sampler = balanced_sampler(self.data.train, self.seed + SEED_SAMPLER, self.class_names)
        self.steps_per_epoch = math.ceil(len(self.data.train) / self.batch_size)

        self.run_dir = Path(run_dir) if run_dir is not None else None
        run_id = self.run_dir.name if self.run_dir is not None else resolve_run_id(cfg["experiment"].get("run_id"))
        self.record = ExperimentRecord(run_id, cfg)
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            write_config_snapshot(cfg, self.run_dir)
            self.record.log_path = self.run_dir / "log.jsonl"
            self.record.log_path.write_text("")

        self.epoch = 0
        self.best_auc = -math.inf
        self.best_loss = math.inf
        self.best_epoch = 0
        self.best_state = self.model.state_dict()
        self.stale = 0

    @property
    def should_stop(self) -> bool:
        return self.epoch >= self.max_epochs or self.stale >= self.patience

    def _train_step(self, k: int) -> tuple[float, np.ndarray, np.ndarray]:
        segs = [self.data.train[next(self.sampler)] for _ in range(self.batch_size)]
        x, y = self.data.batch(segs, self.chain, self.aug_rng, self.model.dtype)
        logits = forward(self.model, x, "train")
        loss = softmax_cross_entropy(logits, y)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at epoch {self.epoch + 1}, batch {k}")
        backward(loss)
        step(self.params, self.opt)
        zero_grad(self.params)
        return value, y, logits.data

    def run_epoch(self) -> EpochRecord:
        started = time.time()
        lr = self.opt.lr
        losses, labels, logits = [], [], []
        for k in range(self.steps_per_epoch):
            value, y, out = self._train_step(k)
            losses.append(value)
            labels.append(y)
            logits.append(out)
        self.epoch += 1
        scheduler_step(self.opt, self.epoch)

        y = np.concatenate(labels)
        probs = softmax(np.concatenate(logits))
        train = compute_metrics((y != 0).astype(int), positive_scores(probs), self.threshold,
                                float(np.mean(losses))).to_dict()
        val = evaluate(self.model, self.data, self.data.val, self.threshold)
        auc, val_loss = val.metrics.auc, val.metrics.loss
        # AUC saturates at 1.0 on easy validation sets; a tie then counts as
        # an improvement only if validation loss strictly drops
        if auc > self.best_auc or (auc == self.best_auc and val_loss < self.best_loss):
            self.best_auc, self.best_loss, self.best_epoch, self.stale = auc, val_loss, self.epoch, 0
            self.best_state = self.model.state_dict()
        else:
            self.stale += 1
        rec = EpochRecord(self.epoch, lr, train, val.metrics.to_dict(), val.per_class, started, time.time())
        self.record.append(rec)
        log.info("epoch %d: loss %.4f val_auc %.4f", self.epoch, train["loss"], auc)
        return rec

    def checkpoint(self, best: bool = True) -> Checkpoint:
        tensors = self.best_state if best else self.model.state_dict()
        opt_header, opt_arrays = state_to_arrays(self.opt)
        return Checkpoint(self.model.spec, self.class_names, self.data.preprocessing, dict(tensors),
                          optimizer=None if best else opt_header,
                          optimizer_tensors={} if best else opt_arrays,
                          epoch=self.best_epoch if best else self.epoch,
                          best_metric=self.best_auc if math.isfinite(self.best_auc) else None,
                          config=self.tree)

    def run(self) -> tuple[Checkpoint, ExperimentRecord]:
        while not self.should_stop:
            self.run_epoch()
        if self.stale >= self.patience:
            log.info("early stop after epoch %d (best epoch %d)", self.epoch, self.best_epoch)
        best = self.checkpoint(best=True)
        if self.run_dir is not None:
            save_checkpoint(best, self.run_dir / "best.ckpt")
            save_checkpoint(self.checkpoint(best=False), self.run_dir / "last.ckpt")
        return best, self.record


def train(config: ResolvedConfig | Mapping[str, Any], data: DataBundle | None = None,
          run_dir: str | Path | None = None) -> tuple[Checkpoint, ExperimentRecord]:
    return Trainer(config, data, run_dir).run()


def finetune(config: ResolvedConfig | Mapping[str, Any], checkpoint: str | Path | Checkpoint,
             mode: str = "all", data: DataBundle | None = None,
             run_dir: str | Path | None = None) -> tuple[Checkpoint, ExperimentRecord]:
    """Continue training from a checkpoint with ``all`` or ``head-only`` trainable parameters."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    return Trainer(config, data, run_dir, init=ckpt, finetune_mode=mode).run()
