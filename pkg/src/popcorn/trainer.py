"""Progressive pseudo-labeling training loop and its ablation arms.

A run trains on the labeled samples until validation Dice stops improving,
then repeats cycles of: embed every unlabeled and training sample with the
current model, pick the ``K`` unlabeled samples closest to the training set
(or ``K`` random ones), pseudo-label them with the current model, move them
into the training set and train ``N`` more epochs.  The loop ends once the
unlabeled set is empty (or after ``max_cycles``).
"""
import enum
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import io as pio
from .data import DatasetPool, Provenance, promote
from .errors import ConfigError, DataError, FormatError
from .losses import pair_batch_loss, single_batch_loss
from .model import OptimizerState, apply_gradients, embed_sample, init_model, load_checkpoint, predict_mask, save_checkpoint
from .pairing import AugmentConfig, PairPolicy, sample_pair, sample_single
from .selection import build_graph, random_select, select
from .stats import image_metrics


class Strategy(str, enum.Enum):
    POPCORN = "popcorn"
    NO_CR = "no-cr"
    RANDOM_SELECT = "random-select"
    BASELINE = "baseline"
    BASELINE_CR = "baseline-cr"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown strategy {value!r}; choose from {[s.value for s in cls]}") from None

    @property
    def uses_unlabeled(self):
        return self not in (Strategy.BASELINE, Strategy.BASELINE_CR)

    @property
    def uses_pairs(self):
        return self is not Strategy.BASELINE


@dataclass
class TrainerConfig:
    strategy: str = "popcorn"
    K: int = 200
    N: int = 2
    p: int = 5
    alpha: float = 0.2
    threshold: float = 0.5
    initial_epochs: int = 100
    patience: int = 20
    batch_size: int = 4
    seed: int = 0
    max_cycles: Optional[int] = None
    validation_fraction: float = 0.2

    def __post_init__(self):
        self.strategy = Strategy.parse(self.strategy).value

    def validate(self):
        if self.K < 1 or self.N < 1 or self.p < 1:
            raise ConfigError("trainer.K, trainer.N and trainer.p must be >= 1")
        if self.alpha < 0:
            raise ConfigError("trainer.alpha must be >= 0")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("trainer.threshold must lie in (0, 1)")
        if self.initial_epochs < 0 or self.patience < 1 or self.batch_size < 1:
            raise ConfigError("trainer.initial_epochs >= 0, patience >= 1 and batch_size >= 1 required")
        if self.max_cycles is not None and self.max_cycles < 0:
            raise ConfigError("trainer.max_cycles must be >= 0")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("trainer.validation_fraction must lie in [0, 1)")
        return self

    @property
    def strategy_enum(self):
        return Strategy(self.strategy)

    @property
    def effective_alpha(self):
        return 0.0 if self.strategy_enum is Strategy.NO_CR else float(self.alpha)

    def to_dict(self):
        return asdict(self)


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if self.lr <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps <= 0:
            raise ConfigError("optimizer: lr > 0, beta1/beta2 in [0, 1), eps > 0 required")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class CycleLog:
    cycle: int
    selected_ids: list
    scores: list
    mean_total_loss: float
    mean_reg_loss: Optional[float]
    validation_dice: Optional[float]
    pool_sizes: tuple
    labeling_model_hash: str = ""
    trained_model_hash: str = ""
    test_dice: Optional[float] = None

    def to_record(self):
        rec = asdict(self)
        rec["pool_sizes"] = list(self.pool_sizes)
        rec["scores"] = [None if (isinstance(s, float) and math.isnan(s)) else s for s in self.scores]
        rec["type"] = "cycle"
        return rec

    @classmethod
    def from_record(cls, rec):
        rec = {k: v for k, v in rec.items() if k not in ("type", "time")}
        rec["pool_sizes"] = tuple(rec["pool_sizes"])
        rec["scores"] = [float("nan") if s is None else s for s in rec["scores"]]
        return cls(**rec)


@dataclass
class RunResult:
    model: object
    optimizer: OptimizerState
    cycles: list
    pool: DatasetPool
    initial_model_hash: str
    completed: bool = True
    epochs: list = field(default_factory=list)


def expected_cycles(m, k):
    """Number of selection cycles needed to absorb ``m`` samples at ``k`` per cycle."""
    return -(-m // k) if m > 0 else 0


def promotion_sizes(m, k):
    sizes = []
    while m > 0:
        sizes.append(min(k, m))
        m -= sizes[-1]
    return sizes


def assign_pseudo_labels(model, samples, threshold=0.5):
    """Threshold the current model's full-volume predictions, in input order."""
    for s in samples:
        if s.provenance is not Provenance.UNLABELED:
            raise DataError(f"{s.id} is not unlabeled")
    return [predict_mask(model, s.volume, threshold) for s in samples]


def mean_dice(model, samples, threshold=0.5):
    if not samples:
        return None
    vals = [image_metrics(predict_mask(model, s.volume, threshold), s.mask).dice for s in samples]
    return float(np.mean(vals))


class RunLog:
    """Line-delimited JSON records; ``reproducible`` zeroes timestamps."""

    def __init__(self, path=None, reproducible=False):
        self.path = Path(path) if path else None
        self.reproducible = reproducible
        self.records = []

    def write(self, rec):
        rec = dict(rec)
        rec["time"] = 0.0 if self.reproducible else round(time.time(), 3)
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def truncate(self, n):
        self.records = self.records[:n]
        if self.path is not None:
            with open(self.path, "w") as fh:
                for rec in self.records:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, reproducible=False):
        log = cls(path, reproducible)
        if log.path.exists():
            with open(log.path) as fh:
                log.records = [json.loads(line) for line in fh if line.strip()]
        return log


class Trainer:
    def __init__(self, config, model_config, augment=None, pairs=None, optimizer=None):
        self.config = config.validate()
        self.model_config = model_config.validate()
        self.augment = (augment or AugmentConfig()).validate()
        self.pairs = (pairs or PairPolicy()).validate()
        self.optimizer = (optimizer or OptimizerConfig()).validate()
        self.strategy = config.strategy_enum

    # -- building blocks -----------------------------------------------------

    def new_state(self):
        model = init_model(self.model_config, self.config.seed)
        opt = OptimizerState.for_model(model, **self.optimizer.to_dict())
        rng = np.random.default_rng([self.config.seed, 1])
        return model, opt, rng

    def _uses_cr(self):
        return self.strategy.uses_pairs

    @property
    def behaviour(self):
        """What the strategy actually does; popcorn at alpha=0 and no-cr coincide."""
        s = self.strategy
        return {
            "selection": "random" if s is Strategy.RANDOM_SELECT else ("proximity" if s.uses_unlabeled else "none"),
            "loss": "pair" if s.uses_pairs else "single",
            "alpha": self.config.effective_alpha if s.uses_pairs else 0.0,
        }

    def train_epoch(self, model, opt, pool, rng):
        """One epoch of ceil(|T| / batch_size) optimizer steps."""
        cfg = self.config
        ps = self.model_config.patch_size
        steps = -(-len(pool.training) // cfg.batch_size)
        totals, regs, segs = [], [], []
        for _ in range(steps):
            if self._uses_cr():
                batch = [sample_pair(pool, self.pairs, self.augment, ps, rng) for _ in range(cfg.batch_size)]
                reports, grads = pair_batch_loss(model, batch, cfg.effective_alpha)
                totals += [r.total for r in reports]
                regs += [r.reg for r in reports]
                segs += [r.seg_i + r.seg_j for r in reports]
            else:
                batch = [sample_single(pool, self.pairs, self.augment, ps, rng) for _ in range(cfg.batch_size)]
                losses, grads = single_batch_loss(model, batch)
                totals += losses
                segs += losses
            apply_gradients(model, grads, opt)
        return {
            "mean_total_loss": float(np.mean(totals)),
            "mean_seg_loss": float(np.mean(segs)),
            "mean_reg_loss": float(np.mean(regs)) if regs else None,
            "steps": steps,
        }

    def train_initial(self, model, opt, pool, validation, rng, log=None):
        """Labeled-only training with early stopping on validation Dice.

        Restores the parameters and optimizer state of the best validation
        epoch.  Returns ``(model, opt)``.
        """
        for s in pool.training:
            if s.provenance is not Provenance.LABELED:
                raise DataError("initial training expects only labeled samples in the training set")
        if not pool.training:
            raise DataError("no labeled samples to train on")
        cfg = self.config
        best, best_state, wait = -np.inf, None, 0
        for epoch in range(cfg.initial_epochs):
            stats = self.train_epoch(model, opt, pool, rng)
            vd = mean_dice(model, validation, cfg.threshold)
            if log is not None:
                log.write({"type": "epoch", "phase": "initial", "cycle": 0, "epoch": epoch, "validation_dice": vd, **stats})
            if vd is None:
                continue
            if vd > best:
                best, wait = vd, 0
                best_state = (model.copy(), opt.copy())
            else:
                wait += 1
                if wait >= cfg.patience:
                    break
        if best_state is not None:
            model, opt = best_state
        return model, opt

    def embed_all(self, model, samples):
        return {s.id: embed_sample(model, s) for s in samples}

    def choose(self, model, pool, rng):
        cfg = self.config
        if self.strategy is Strategy.RANDOM_SELECT:
            return random_select(pool.unlabeled_ids(), cfg.K, rng)
        graph = build_graph(self.embed_all(model, pool.unlabeled), self.embed_all(model, pool.training))
        return select(graph, cfg.K, cfg.p)

    # -- full run --------------------------------------------------------------

    def run(self, pool, validation=(), test=(), run_dir=None, resume=False, stop_after_cycle=None,
            reproducible=False, track_test=True):
        """Execute the whole schedule; see the module docstring.

        With ``run_dir`` set, log records, pseudo-label masks and a
        checkpoint per cycle are written there, and ``resume=True`` picks up
        from the newest checkpoint with identical continuation.
        ``stop_after_cycle`` ends the run early (as an interruption would)
        right after that cycle's checkpoint.
        """
        cfg = self.config
        validation = list(validation)
        test = list(test)
        overlap = {s.id for s in validation} & {s.id for s in pool.training + pool.unlabeled}
        if overlap:
            raise DataError(f"validation samples also in the pool: {sorted(overlap)[:3]}")
        if not any(s.provenance is Provenance.LABELED for s in pool.training):
            raise DataError("no labeled samples in the pool")
        ckpt_dir = pseudo_dir = None
        if run_dir is not None:
            run_dir = Path(run_dir)
            ckpt_dir = pio.ensure_dir(run_dir / "checkpoints")
            pseudo_dir = pio.ensure_dir(run_dir / "pseudo")
            log = RunLog.load(run_dir / "log.jsonl", reproducible) if resume else RunLog(run_dir / "log.jsonl", reproducible)
            if not resume and log.path.exists():
                log.path.unlink()
        else:
            log = RunLog(None, reproducible)

        state = self._resume_state(pool, ckpt_dir, pseudo_dir, log) if resume and ckpt_dir else None
        if state is None:
            if resume:
                log.truncate(0)
            model, opt, rng = self.new_state()
            model, opt = self.train_initial(model, opt, pool, validation, rng, log)
            initial_hash = model.state_hash()
            log.write({"type": "initial", "model_hash": initial_hash,
                       "validation_dice": mean_dice(model, validation, cfg.threshold), "pool_sizes": list(pool.sizes)})
            cycle, promotions = 0, []
            self._checkpoint(ckpt_dir, 0, model, opt, rng, log, promotions, initial_hash, done=False)
        else:
            model, opt, rng, pool, cycle, promotions, initial_hash, done = state
            if done:
                return RunResult(model, opt, _cycle_logs(log), pool, initial_hash, True, _epoch_logs(log))
        if stop_after_cycle is not None and cycle >= stop_after_cycle:
            return RunResult(model, opt, _cycle_logs(log), pool, initial_hash, False, _epoch_logs(log))

        if self.strategy.uses_unlabeled:
            while pool.unlabeled and (cfg.max_cycles is None or cycle < cfg.max_cycles):
                cycle += 1
                labeling_hash = model.state_hash()
                sel = self.choose(model, pool, rng)
                index = {s.id: s for s in pool.unlabeled}
                chosen = [index[i] for i in sel.selected_ids]
                masks = assign_pseudo_labels(model, chosen, cfg.threshold)
                if pseudo_dir is not None:
                    for sid, m in zip(sel.selected_ids, masks):
                        pio.save_mask(pseudo_dir / f"{sid}.mask.rt", m)
                pool = promote(pool, sel.selected_ids, masks, cycle)
                promotions.append(list(sel.selected_ids))
                ep_stats = []
                for e in range(cfg.N):
                    st = self.train_epoch(model, opt, pool, rng)
                    ep_stats.append(st)
                    log.write({"type": "epoch", "phase": "cycle", "cycle": cycle, "epoch": e, **st})
                regs = [st["mean_reg_loss"] for st in ep_stats if st["mean_reg_loss"] is not None]
                entry = CycleLog(
                    cycle=cycle,
                    selected_ids=list(sel.selected_ids),
                    scores=list(sel.scores),
                    mean_total_loss=float(np.mean([st["mean_total_loss"] for st in ep_stats])),
                    mean_reg_loss=float(np.mean(regs)) if regs else None,
                    validation_dice=mean_dice(model, validation, cfg.threshold),
                    pool_sizes=pool.sizes,
                    labeling_model_hash=labeling_hash,
                    trained_model_hash=model.state_hash(),
                    test_dice=mean_dice(model, test, cfg.threshold) if track_test else None,
                )
                log.write(entry.to_record())
                finished = not pool.unlabeled or (cfg.max_cycles is not None and cycle >= cfg.max_cycles)
                self._checkpoint(ckpt_dir, cycle, model, opt, rng, log, promotions, initial_hash, done=False)
                if stop_after_cycle is not None and cycle >= stop_after_cycle and not finished:
                    return RunResult(model, opt, _cycle_logs(log), pool, initial_hash, False, _epoch_logs(log))

        log.write({"type": "final", "model_hash": model.state_hash(), "cycles": cycle, "pool_sizes": list(pool.sizes)})
        self._checkpoint(ckpt_dir, cycle, model, opt, rng, log, promotions, initial_hash, done=True)
        return RunResult(model, opt, _cycle_logs(log), pool, initial_hash, True, _epoch_logs(log))

    # -- persistence -------------------------------------------------------------

    def _checkpoint(self, ckpt_dir, cycle, model, opt, rng, log, promotions, initial_hash, done):
        if ckpt_dir is None:
            return
        extra = {
            "cycle": cycle,
            "log_lines": len(log.records),
            "promotions": promotions,
            "initial_model_hash": initial_hash,
            "done": done,
            "behaviour": self.behaviour,
        }
        name = "final.ckpt" if done else f"cycle_{cycle:04d}.ckpt"
        tmp = ckpt_dir / (name + ".tmp")
        save_checkpoint(tmp, model, opt, rng.bit_generator.state, extra)
        os.replace(tmp, ckpt_dir / name)

    def _resume_state(self, pool, ckpt_dir, pseudo_dir, log):
        final = ckpt_dir / "final.ckpt"
        cands = sorted(ckpt_dir.glob("cycle_*.ckpt"))
        path = final if final.exists() else (cands[-1] if cands else None)
        if path is None:
            return None
        model, opt, rng_state, extra = load_checkpoint(path)
        if model.config != self.model_config:
            raise FormatError(f"{path}: checkpoint model config differs from the run config")
        if extra.get("behaviour") != self.behaviour:
            raise FormatError(f"{path}: checkpoint was written by a different strategy ({extra.get('behaviour')})")
        rng = np.random.default_rng()
        rng.bit_generator.state = rng_state
        for c, ids in enumerate(extra["promotions"], start=1):
            masks = [pio.load_mask(pseudo_dir / f"{sid}.mask.rt") for sid in ids]
            pool = promote(pool, ids, masks, c)
        if len(log.records) < extra["log_lines"]:
            raise FormatError(f"{log.path}: log is shorter than the checkpoint expects")
        log.truncate(extra["log_lines"])
        return model, opt, rng, pool, extra["cycle"], extra["promotions"], extra["initial_model_hash"], extra["done"]


def _cycle_logs(log):
    return [CycleLog.from_record(r) for r in log.records if r.get("type") == "cycle"]


def _epoch_logs(log):
    return [r for r in log.records if r.get("type") == "epoch"]


def run(config, pool, validation=(), test=(), model_config=None, augment=None, pairs=None, optimizer=None, **kwargs):
    """Convenience wrapper around :class:`Trainer`."""
    from .model import ModelConfig

    trainer = Trainer(config, model_config or ModelConfig(), augment, pairs, optimizer)
    return trainer.run(pool, validation, test, **kwargs)
