"""Joint training of measurement and reconstruction with Adam.

The objective is the batch mean of per-image summed squared error between
the reconstruction and the input crop.  Because the loss is summed over
pixels, the gradient scale grows with the crop area; Adam's normalisation
absorbs most of that, but the effective step size still depends on
``crop_size``.
"""
import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from blockcs.checkpoint import Checkpoint, save_checkpoint
from blockcs.data import BatchIterator, ConfigError
from blockcs.kernels import AdamState, adam_step
from blockcs.model import METHODS, CSModel, ModelConfig

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step}: loss={loss}")
        self.step = step
        self.loss = loss


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    method: str = "full"
    lr: float = 1e-4
    epochs: int = 200
    batch_size: int = 8
    crop_size: int = 64
    seed: int = 0
    steps_per_epoch: int | None = None  # default: ceil(dataset size / batch size)
    checkpoint_path: str | None = None
    log_every: int = 10
    clip_norm: float | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        # lr == 0 is allowed: it freezes the parameters, which is a useful check.
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ConfigError(f"lr must be a finite value >= 0, got {self.lr!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.crop_size < 1 or self.crop_size % self.model.block_size:
            raise ConfigError(
                f"crop_size {self.crop_size} must be a positive multiple of block size {self.model.block_size}"
            )
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError(f"steps_per_epoch must be >= 1, got {self.steps_per_epoch}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError(f"clip_norm must be > 0, got {self.clip_norm}")

    def train_fields(self):
        """Training settings as plain JSON-able values.  The model config is
        stored separately and the output path is left out so a checkpoint's
        bytes do not depend on where it was written."""
        out = asdict(self)
        del out["model"], out["checkpoint_path"]
        return out

    @classmethod
    def from_checkpoint(cls, ckpt, **overrides):
        fields = dict(ckpt.train)
        fields.update(overrides)
        return cls(model=ckpt.config, **fields)


@dataclass
class TrainResult:
    model: CSModel
    checkpoint: Checkpoint
    history: list  # (step, loss) pairs


def clip_global_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


class Trainer:
    def __init__(self, config, records, checkpoint=None):
        self.config = config
        self.iterator = BatchIterator(
            records, config.crop_size, config.batch_size, config.seed, config.model.block_size
        )
        self.steps_per_epoch = config.steps_per_epoch or self.iterator.batches_per_epoch
        if checkpoint is None:
            self.model = CSModel.create(config.model, config.method, config.seed)
            self.adam = AdamState.zeros_like(self.model.parameters())
            self.step_count = 0
        else:
            if checkpoint.config != config.model or checkpoint.method != config.method:
                raise ConfigError("checkpoint model/method does not match the training config")
            self.model = CSModel.from_parameters(
                checkpoint.config, checkpoint.method, {k: v.copy() for k, v in checkpoint.params.items()}
            )
            self.adam = AdamState(
                m={k: v.copy() for k, v in checkpoint.adam.m.items()},
                v={k: v.copy() for k, v in checkpoint.adam.v.items()},
                t=checkpoint.adam.t, beta1=checkpoint.adam.beta1,
                beta2=checkpoint.adam.beta2, eps=checkpoint.adam.eps,
            )
            self.step_count = checkpoint.step
            self.iterator.load_state_dict({
                "epoch": checkpoint.iterator_epoch,
                "cursor": checkpoint.iterator_cursor,
                "rng": checkpoint.rng_state,
            })
        self.history = []

    @property
    def total_steps(self):
        return self.config.epochs * self.steps_per_epoch

    @property
    def epoch(self):
        return self.step_count // self.steps_per_epoch

    def step(self):
        batch = self.iterator.next_batch()
        loss, grads = self.model.loss_and_grads(batch)
        if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
            raise TrainingDivergedError(self.step_count, loss)
        if self.config.clip_norm is not None:
            clip_global_norm(grads, self.config.clip_norm)
        adam_step(self.model.parameters(), grads, self.adam, self.config.lr)
        self.history.append((self.step_count, loss))
        if self.config.log_every and self.step_count % self.config.log_every == 0:
            logger.info("step %d epoch %d loss %.6g", self.step_count, self.epoch, loss)
        self.step_count += 1
        return loss

    def run(self, max_steps=None):
        """Train until ``total_steps`` (or ``max_steps`` more steps)."""
        stop = self.total_steps
        if max_steps is not None:
            stop = min(stop, self.step_count + max_steps)
        while self.step_count < stop:
            self.step()
        return self.history

    def checkpoint(self):
        it = self.iterator.state_dict()
        return Checkpoint(
            config=self.config.model,
            method=self.config.method,
            params={k: v.copy() for k, v in self.model.parameters().items()},
            adam=AdamState(
                m={k: v.copy() for k, v in self.adam.m.items()},
                v={k: v.copy() for k, v in self.adam.v.items()},
                t=self.adam.t, beta1=self.adam.beta1, beta2=self.adam.beta2, eps=self.adam.eps,
            ),
            rng_state=it["rng"],
            step=self.step_count,
            epoch=self.epoch,
            iterator_epoch=it["epoch"],
            iterator_cursor=it["cursor"],
            train=self.config.train_fields(),
        )


def _train(config, records, checkpoint=None, max_steps=None):
    trainer = Trainer(config, records, checkpoint)
    history = trainer.run(max_steps)
    ckpt = trainer.checkpoint()
    if config.checkpoint_path:
        save_checkpoint(ckpt, config.checkpoint_path)
    return TrainResult(trainer.model, ckpt, history)


def train_full(config, records, checkpoint=None, max_steps=None):
    """Train the full-image model; ``config.method`` must be ``"full"``."""
    if config.method != "full":
        raise ConfigError(f"train_full needs method 'full', got {config.method!r}")
    return _train(config, records, checkpoint, max_steps)


def train_baseline(config, records, checkpoint=None, max_steps=None):
    if config.method != "baseline":
        raise ConfigError(f"train_baseline needs method 'baseline', got {config.method!r}")
    return _train(config, records, checkpoint, max_steps)


def train(config, records, checkpoint=None, max_steps=None):
    return _train(config, records, checkpoint, max_steps)


def write_loss_csv(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for step, loss in history:
            writer.writerow([step, repr(loss)])


def read_loss_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [(int(s), float(v)) for s, v in rows[1:]]
