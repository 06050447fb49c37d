"""Training regimes: plain, adversarial training, adversarial distillation, hybrid and its ablation.

Every regime is a list of phases over the same batch loop. A phase is either
``plain`` (every batch reconstructs itself), ``at`` (every (k+1)-th batch is
replaced by its adversarial version, reconstructed toward the clean batch) or
``ad`` (the same schedule, with a distillation term toward a frozen teacher).
"""
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attack import generate_training_adversarial
from .config import DefenseConfig, ScaeConfig
from .data import batches
from .evaluation import encode_dataset
from .classifiers import train_linear
from .model import compute_loss, encode, init_model

PHASES = {
    "plain": lambda c: [("plain", c.n_ep)],
    "at": lambda c: [("at", c.n_ep)],
    "ad": lambda c: [("ad", c.n_ep)],
    "hat": lambda c: [("ad", c.n_ad), ("at", c.n_at)],
    "ntat": lambda c: [("plain", c.n_ad), ("at", c.n_at)],
}
REPORT_FIELDS = ("epoch", "phase", "total_loss", "rec", "non_rec", "distill", "adv_batches", "normal_batches")


def loss_at(x, x_target, model, rng=None, training=True):
    """Loss with every term on input ``x`` except reconstruction, which targets ``x_target``."""
    outputs = encode(model, x, training=training, rng=rng)
    return compute_loss(model, x, x_target, outputs), outputs


def presence_features(outputs, source="prior"):
    if source == "prior":
        return outputs.prior_presence
    return outputs.posterior_presence.sum(-1)


def teacher_encoding(teacher, x, source="prior"):
    with torch.no_grad():
        outputs = encode(teacher, x, training=False)
    return presence_features(outputs, source).detach()


def loss_ad(x, x_input, teacher, student, lam, rng=None, training=True, source="prior", teacher_code=None):
    """``(1 - lam) * loss_at(x_input -> x) + lam * ||E_teacher(x) - E_student(x_input)||_2``.

    The teacher sees the clean batch and receives no gradient. Returns
    ``(total, at_breakdown, distill)``.
    """
    at, outputs = loss_at(x_input, x, student, rng=rng, training=training)
    if teacher_code is None:
        teacher_code = teacher_encoding(teacher, x, source)
    diff = teacher_code - presence_features(outputs, source)
    distill = torch.linalg.vector_norm(diff, dim=-1).mean()
    return (1.0 - lam) * at.total + lam * distill, at, distill


class BatchCounter:
    """The ``n_bch`` counter: one adversarial batch after every ``k`` normal ones."""

    def __init__(self, k):
        if k < 0:
            raise ValueError("k must be >= 0")
        self.k = k
        self.n_bch = 0

    def is_adversarial_batch(self):
        if self.n_bch == self.k:
            self.n_bch = 0
            return True
        self.n_bch += 1
        return False


def learning_rate(step, cfg: DefenseConfig):
    """Staircase decay: ``lr * rate ** (step // decay_steps)``."""
    return cfg.lr * cfg.lr_decay_rate ** (step // cfg.lr_decay_steps)


def make_optimizer(model, cfg: DefenseConfig):
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    else:
        opt = torch.optim.RMSprop(model.parameters(), lr=cfg.lr, alpha=cfg.rms_alpha, eps=cfg.rms_eps,
                                  momentum=cfg.momentum)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: cfg.lr_decay_rate ** (s // cfg.lr_decay_steps))
    return opt, sched


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    total_loss: float
    rec: float
    non_rec: float
    distill: float
    adv_batches: int
    normal_batches: int


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    checkpoint: str = ""

    def write_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(REPORT_FIELDS)
            for e in self.epochs:
                writer.writerow([e.epoch, e.phase, repr(e.total_loss), repr(e.rec), repr(e.non_rec),
                                 repr(e.distill), e.adv_batches, e.normal_batches])
        return path


def _batch_seed(seed, step):
    return int(np.random.SeedSequence([int(seed), int(step), 1]).generate_state(1)[0])


class Trainer:
    """Runs the phases of one regime on a student model.

    ``generator`` is a callable ``(x, model, classifier, sample_ids, seed) -> x_adv``;
    it defaults to the sign-gradient generator with ``cfg.generator``.
    """

    def __init__(self, scae_cfg: ScaeConfig, cfg: DefenseConfig, seed=0, teacher=None, generator=None,
                 model=None, on_epoch=None):
        self.cfg = cfg.validate()
        self.seed = seed
        self.model = model if model is not None else init_model(scae_cfg, seed)
        self.teacher = teacher
        if teacher is not None:
            for p in teacher.parameters():
                p.requires_grad_(False)
            teacher.eval()
        self.generator = generator or self._default_generator
        self.opt, self.sched = make_optimizer(self.model, cfg)
        self.counter = BatchCounter(cfg.interval_k)
        self.noise = torch.Generator().manual_seed(int(seed))
        self.shuffle = np.random.default_rng(seed)
        self.step = 0
        self.epoch = 0
        self.report = TrainReport()
        self.linear = None
        self.on_epoch = on_epoch

    def _default_generator(self, x, model, classifier, sample_ids, seed):
        return generate_training_adversarial(x, model, classifier, self.cfg.generator, sample_ids, seed)

    def phases(self):
        return PHASES[self.cfg.regime](self.cfg)

    def refit_linear(self, dataset):
        _, post = encode_dataset(self.model, dataset)
        self.linear = train_linear(post, dataset.labels, epochs=self.cfg.linear_epochs, lr=self.cfg.linear_lr)
        return self.linear

    def train_step(self, phase, x, sample_ids):
        """One optimizer step on batch ``x``; returns ``(adversarial?, total, rec, non_rec, distill)``."""
        adversarial = phase != "plain" and self.counter.is_adversarial_batch()
        x_input = x
        if adversarial:
            x_input = self.generator(x, self.model, self.linear, sample_ids, _batch_seed(self.seed, self.step))
        self.model.train()
        if phase == "ad":
            if self.teacher is None:
                raise ValueError("adversarial distillation needs a teacher model")
            total, at, distill = loss_ad(x, x_input, self.teacher, self.model, self.cfg.lam, rng=self.noise,
                                         source=self.cfg.distill_source)
            distill = distill.item()
        else:
            at, _ = loss_at(x_input, x, self.model, rng=self.noise)
            total, distill = at.total, 0.0
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        self.opt.step()
        self.sched.step()
        self.step += 1
        return adversarial, total.item(), at.rec.item(), at.non_rec.item(), distill

    def run_epoch(self, phase, dataset):
        if phase != "plain":
            self.refit_linear(dataset)
        sums = np.zeros(4)
        n_adv = n_norm = 0
        for batch in batches(dataset, self.cfg.batch_size, shuffle=True, rng=self.shuffle):
            adv, *values = self.train_step(phase, torch.from_numpy(batch.images), batch.indices)
            sums += values
            n_adv += adv
            n_norm += not adv
        self.epoch += 1
        mean = sums / max(n_adv + n_norm, 1)
        record = EpochRecord(self.epoch, phase, *map(float, mean), n_adv, n_norm)
        self.report.epochs.append(record)
        if self.on_epoch:
            self.on_epoch(self, record)
        return record

    def fit(self, dataset):
        for phase, n_epochs in self.phases():
            for _ in range(n_epochs):
                self.run_epoch(phase, dataset)
        return self.model, self.report


def train_regime(dataset, scae_cfg, cfg, seed=0, teacher=None, generator=None, on_epoch=None):
    return Trainer(scae_cfg, cfg, seed, teacher, generator, on_epoch=on_epoch).fit(dataset)


def _with_regime(cfg, regime):
    from dataclasses import replace
    return replace(cfg, regime=regime)


def train_plain(dataset, scae_cfg, cfg, seed=0, **kw):
    return train_regime(dataset, scae_cfg, _with_regime(cfg, "plain"), seed, **kw)


def train_at(dataset, scae_cfg, cfg, seed=0, generator=None, **kw):
    return train_regime(dataset, scae_cfg, _with_regime(cfg, "at"), seed, generator=generator, **kw)


def train_ad(dataset, scae_cfg, cfg, teacher, seed=0, generator=None, **kw):
    return train_regime(dataset, scae_cfg, _with_regime(cfg, "ad"), seed, teacher, generator, **kw)


def train_hat(dataset, scae_cfg, cfg, teacher, seed=0, generator=None, **kw):
    return train_regime(dataset, scae_cfg, _with_regime(cfg, "hat"), seed, teacher, generator, **kw)


def train_ntat(dataset, scae_cfg, cfg, seed=0, generator=None, **kw):
    return train_regime(dataset, scae_cfg, _with_regime(cfg, "ntat"), seed, generator=generator, **kw)
