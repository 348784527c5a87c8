"""SGD training loop, evaluation and ablation runs."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import checkpoint as ckpt_mod
from .checkpoint import Checkpoint, import_weights
from .config import RunConfig
from .data import augment, sample_rng, stack_batch
from .losses import dice_score, level_predictions, loss_terms, training_levels
from .model import MsTwins, ablate
from .tensor import NonFiniteError, Tensor, new_tape, no_grad

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class MissingGradientError(RuntimeError):
    pass


@dataclass
class OptimState:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "poly"
    power: float = 0.9
    max_steps: int = 1
    step: int = 0
    lr: float = 0.01
    velocity: dict = field(default_factory=dict)

    def lr_at(self, step: int) -> float:
        if self.schedule == "constant":
            return self.lr0
        frac = min(step / self.max_steps, 1.0)
        return self.lr0 * (1.0 - frac) ** self.power


def sgd_step(params: dict, st: OptimState) -> None:
    """v <- m*v + g + wd*p ;  p <- p - lr*v ; then advance the lr schedule."""
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradientError(f"parameter {name!r} has no gradient")
        v = st.velocity.get(name)
        if v is None:
            v = st.velocity[name] = np.zeros_like(p.data)
        # in place: the full model holds tens of millions of weights
        v *= st.momentum
        v += p.grad
        v += st.weight_decay * p.data
        p.data -= st.lr * v
    st.step += 1
    st.lr = st.lr_at(st.step)


def clip_grad_norm(params: dict, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the norm before clipping."""
    total = float(np.sqrt(sum(float(np.dot(p.grad.ravel(), p.grad.ravel()))
                              for p in params.values() if p.grad is not None)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


def thread_count() -> int:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        if os.environ.get(var):
            return int(os.environ[var])
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class DiceTable:
    """Per-class Dice averaged over samples; ``mean`` skips the background class."""

    per_class: np.ndarray
    per_sample: np.ndarray  # (n_samples, num_classes)

    @property
    def mean(self) -> float:
        return float(self.per_class[1:].mean()) if len(self.per_class) > 1 else float(self.per_class[0])

    def header(self) -> list[str]:
        return ["average"] + [f"class{k}" for k in range(1, len(self.per_class))]

    def row(self) -> list[float]:
        return [self.mean] + list(self.per_class[1:])

    def format(self, fmt: str = "table") -> str:
        head, row = self.header(), self.row()
        if fmt == "csv":
            return ",".join(head) + "\n" + ",".join(f"{100 * v:.2f}" for v in row) + "\n"
        widths = [max(len(h), 7) for h in head]
        top = "  ".join(h.rjust(w) for h, w in zip(head, widths))
        vals = "  ".join(f"{100 * v:.2f}".rjust(w) for v, w in zip(row, widths))
        return f"{top}\n{vals}\n"


def dice_table(preds: list, gts: list, num_classes: int) -> DiceTable:
    per = np.array([[dice_score(p, g, k) for k in range(num_classes)] for p, g in zip(preds, gts)])
    per = per.reshape(len(preds), num_classes)
    return DiceTable(per.mean(axis=0) if len(preds) else np.zeros(num_classes), per)


def predict_dataset(model: MsTwins, dataset: list, batch_size: int = 4) -> list:
    preds = []
    for i in range(0, len(dataset), batch_size):
        x, _ = stack_batch(dataset[i:i + batch_size])
        preds.extend(model.predict(Tensor(x)))
    return preds


def evaluate(model, dataset: list, batch_size: int = 4) -> DiceTable:
    """Argmax of the full-resolution logits, scored with per-class Dice."""
    if isinstance(model, Checkpoint):
        model = model_from_checkpoint(model)
    K = model.cfg.num_classes
    for s in dataset:
        if s.mask.size and s.mask.max() >= K:
            raise ValueError(f"dataset has class ids >= model class count {K}")
    return dice_table(predict_dataset(model, dataset, batch_size), [s.mask for s in dataset], K)


def model_from_checkpoint(ck: Checkpoint) -> MsTwins:
    model = MsTwins(ck.config.model, seed=ck.config.train.seed)
    model.load_state_dict(ck.params)
    return model


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class Trainer:
    """Seeded SGD training; batch order and augmentation draws are fixed by
    (seed, epoch, sample index) so a run can resume from any step."""

    def __init__(self, cfg: RunConfig, train_set: list, val_set: Optional[list] = None,
                 model: Optional[MsTwins] = None):
        if not train_set:
            raise ValueError("training set is empty")
        self.cfg = cfg
        self.train_set = train_set
        self.val_set = val_set or []
        self.model = model if model is not None else MsTwins(cfg.model, seed=cfg.train.seed)
        self.import_report = None
        if model is None and cfg.model.pretrained:
            self.import_report = import_weights(cfg.model.pretrained, self.model)
            log.info("pretrained weights: %s", self.import_report)
        tc = cfg.train
        self.steps_per_epoch = math.ceil(len(train_set) / tc.batch_size)
        self.max_steps = tc.epochs * self.steps_per_epoch
        self.state = OptimState(lr0=tc.lr, momentum=tc.momentum, weight_decay=tc.weight_decay,
                                schedule=tc.lr_schedule, power=tc.poly_power,
                                max_steps=max(self.max_steps, 1), lr=tc.lr)
        self.params = dict(self.model.named_parameters())
        self.losses: list[float] = []
        self.history: list[dict] = []

    # -- batching -----------------------------------------------------------
    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.cfg.train.seed, epoch, 7]).permutation(len(self.train_set))

    def batch_for_step(self, step: int) -> tuple:
        epoch, b = divmod(step, self.steps_per_epoch)
        bs = self.cfg.train.batch_size
        idx = self.epoch_order(epoch)[b * bs:(b + 1) * bs]
        samples = [self.train_set[i] for i in idx]
        if self.cfg.train.augment:
            samples = [augment(s, self.cfg.augment, sample_rng(self.cfg.train.seed, epoch, int(i)))
                       for s, i in zip(samples, idx)]
        return stack_batch(samples)

    # -- one optimisation step ----------------------------------------------
    def step(self) -> float:
        x, y = self.batch_for_step(self.state.step)
        new_tape()
        self.model.zero_grad()
        try:
            out = self.model(Tensor(x))
            logits, strides = training_levels(out)
            preds = level_predictions(logits, strides, y, self.cfg.loss.mask_self_errors)
            loss, con, bal = loss_terms(preds, self.cfg.loss)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"step {self.state.step}: first non-finite value from op '{exc.op}'") from exc
        loss.backward()
        clip_grad_norm(self.params, self.cfg.train.grad_clip)
        sgd_step(self.params, self.state)
        value = loss.item()
        self.losses.append(value)
        return value

    def run(self, steps: Optional[int] = None, callback=None) -> "Trainer":
        """Train until ``max_steps`` (or for ``steps`` more steps)."""
        end = self.max_steps if steps is None else min(self.state.step + steps, self.max_steps)
        while self.state.step < end:
            self.step()
            if self.state.step % self.steps_per_epoch == 0:
                self._end_epoch()
            if callback is not None:
                callback(self)
        return self

    def _end_epoch(self) -> None:
        epoch = self.state.step // self.steps_per_epoch
        recent = self.losses[-self.steps_per_epoch:]
        entry = {"epoch": epoch, "step": self.state.step, "loss": float(np.mean(recent))}
        every = self.cfg.train.eval_every
        if self.val_set and every and (epoch % every == 0 or self.state.step >= self.max_steps):
            table = evaluate(self.model, self.val_set)
            entry["val_dice"] = [float(v) for v in table.per_class]
            entry["val_mean_dice"] = table.mean
        self.history.append(entry)
        log.info("epoch %d step %d loss %.4f%s", epoch, self.state.step, entry["loss"],
                 f" val dice {entry['val_mean_dice']:.4f}" if "val_mean_dice" in entry else "")

    # -- persistence --------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        st = self.state
        meta = {
            "step": st.step,
            "lr": st.lr,
            "max_steps": st.max_steps,
            "losses": self.losses,
            "history": self.history,
            "rng": {"seed": self.cfg.train.seed, "epoch": st.step // self.steps_per_epoch,
                    "batch": st.step % self.steps_per_epoch},
            "threads": thread_count(),
        }
        return Checkpoint(self.cfg, self.model.state_dict(),
                          {k: v.copy() for k, v in st.velocity.items()}, meta)

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint, train_set: list, val_set: Optional[list] = None) -> "Trainer":
        model = model_from_checkpoint(ck)
        tr = cls(ck.config, train_set, val_set, model=model)
        tr.state.step = ck.step
        tr.state.lr = float(ck.meta.get("lr", tr.state.lr_at(ck.step)))
        tr.state.velocity = {k: v.copy() for k, v in ck.velocity.items()}
        tr.losses = list(ck.meta.get("losses", []))
        tr.history = list(ck.meta.get("history", []))
        return tr


def train(cfg: RunConfig, dataset: list, epochs: Optional[int] = None,
          val_set: Optional[list] = None) -> tuple:
    """Train from scratch; returns ``(checkpoint, per-epoch metric log)``."""
    if epochs is not None:
        cfg = cfg.replace(epochs=epochs)
    tr = Trainer(cfg, dataset, val_set).run()
    return tr.checkpoint(), tr.history


def run_ablation(cfg: RunConfig, switch: str, train_set: list, eval_set: list) -> DiceTable:
    """Train the ablated variant and score it on ``eval_set``."""
    cfg = RunConfig(ablate(cfg.model, switch), cfg.loss, cfg.augment, cfg.train)
    tr = Trainer(cfg, train_set).run()
    return evaluate(tr.model, eval_set)


def save_checkpoint(tr: Trainer, path) -> None:
    ckpt_mod.save(tr.checkpoint(), path)
