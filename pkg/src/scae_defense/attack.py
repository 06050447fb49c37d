"""Evasion attacks on object-capsule presences.

Two engines share one loop: the optimizer attack (Adam on the tanh-space
perturbation, minimal-L2 search with an alpha bracket) used for evaluation,
and the sign-gradient generator that produces adversarial batches during
training. Both suppress the capsules whose clean prior presence is above the
mean and stay inside the [0, 1] box by construction, without clipping.

Samples are attacked as a batch, but every per-sample quantity (alpha
bracket, optimizer moments, random restarts) is kept separately and the
restarts come from a generator seeded by ``(seed, sample_id)``.
"""
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .classifiers import predict
from .config import AttackConfig
from .model import encode_presences

SUCCESS = "success"
FAILED = "failed"
NO_ACTIVE_CAPSULE = "no_active_capsule"
RECORD_FIELDS = ("sample_id", "clean_label", "predicted_label", "adv_label", "success", "l2_norm", "status")


@dataclass
class AttackResult:
    sample_id: int
    perturbation: np.ndarray  # [H, W], x_adv - x
    adversarial: np.ndarray   # [H, W]
    l2_norm: float            # inf when no adversarial example was found
    success: bool
    status: str
    target_set: tuple
    predicted_label: int      # classifier label of the clean image
    adv_label: int            # classifier label of the returned image
    clean_label: int = -1     # ground truth, when known

    def record(self):
        return {
            "sample_id": self.sample_id,
            "clean_label": self.clean_label,
            "predicted_label": self.predicted_label,
            "adv_label": self.adv_label,
            "success": int(self.success),
            "l2_norm": self.l2_norm,
            "status": self.status,
        }


def select_target_capsules(prior_presence):
    """Indices of the capsules whose presence is strictly above the mean presence."""
    e = torch.as_tensor(prior_presence)
    return tuple(int(i) for i in torch.nonzero(e > e.mean()).flatten())


def target_mask(prior_presence):
    """Batched :func:`select_target_capsules` as a ``[B, K]`` boolean mask."""
    return prior_presence > prior_presence.mean(dim=-1, keepdim=True)


def to_w(x, eps_clamp=AttackConfig.eps_clamp):
    return torch.atanh((2.0 * x - 1.0) * eps_clamp)


def from_w(w, p_prime, x=None):
    """Map a tanh-space point back to image space; returns ``(x_adv, x_adv - x)``."""
    x_adv = 0.5 * (torch.tanh(w + p_prime) + 1.0)
    if x is None:
        x = 0.5 * (torch.tanh(w) + 1.0)
    return x_adv, x_adv - x


def l2(p):
    return torch.linalg.vector_norm(p.flatten(1), dim=1)


def attack_objective(x_adv, x, model, mask, alpha):
    """Per-sample ``||x_adv - x||_2 + alpha * sum of targeted prior presences``.

    ``mask`` is a ``[B, K]`` boolean target mask and ``alpha`` a scalar or ``[B]`` tensor.
    """
    prior, _ = presences(model, x_adv)
    return l2(x_adv - x) + alpha * (prior * mask).sum(-1)


def update_alpha(alpha, alpha_ub, alpha_lb, round_succeeded, blowup=10.0):
    """One step of the alpha search; works on floats or numpy arrays.

    A successful round lowers the upper bound to ``alpha``, a failed one
    raises the lower bound. While the upper bound is still infinite alpha is
    multiplied by ``blowup``, otherwise it moves to the bracket midpoint.
    """
    scalar = np.ndim(alpha) == 0
    alpha, ub, lb = (np.asarray(v, dtype=np.float64) for v in (alpha, alpha_ub, alpha_lb))
    ok = np.asarray(round_succeeded, dtype=bool)
    ub = np.where(ok, alpha, ub)
    lb = np.where(ok, lb, alpha)
    new = np.where(np.isinf(ub), alpha * blowup, (ub + lb) / 2.0)
    if scalar:
        return float(new), float(ub), float(lb)
    return new, ub, lb


def sample_generator(seed, sample_id):
    """Independent torch generator for one sample of one attack run."""
    state = np.random.SeedSequence([int(seed), int(sample_id)]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


def presences(model, x):
    """``(prior, posterior)`` of ``x``; ``model`` is an SCAE or any callable returning that pair."""
    if hasattr(model, "part_encoder"):
        return encode_presences(model, x)
    return model(x)


def objective_gradient(x, p_prime, model, mask, alpha, eps_clamp=AttackConfig.eps_clamp):
    """Per-sample objective at ``p_prime`` and its gradient with respect to ``p_prime``."""
    p = p_prime.detach().clone().requires_grad_(True)
    x_adv, _ = from_w(to_w(x, eps_clamp), p, x)
    prior, _ = presences(model, x_adv)
    loss = l2(x_adv - x) + alpha * (prior * mask).sum(-1)
    (grad,) = torch.autograd.grad(loss.sum(), p)
    return loss.detach(), grad


def _labels(classifier, prior, posterior):
    return np.asarray(predict(classifier, prior.detach(), posterior.detach()))


def adam_step(p, grad, state, cfg):
    m, v, t = state
    t = t + 1
    m.mul_(cfg.decay1).add_(grad, alpha=1.0 - cfg.decay1)
    v.mul_(cfg.decay2).addcmul_(grad, grad, value=1.0 - cfg.decay2)
    m_hat = m / (1.0 - cfg.decay1 ** t)
    v_hat = v / (1.0 - cfg.decay2 ** t)
    return p - cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps), (m, v, t)


def sign_step(p, grad, state, cfg):
    return p - cfg.beta * torch.sign(grad), state


def _run(x, model, classifier, cfg, step, sample_ids, seed, candidate_log):
    """Shared outer/inner loop. Returns per-sample best norms, images and bookkeeping."""
    cfg.validate()
    x = torch.as_tensor(x)
    if x.dim() == 2:
        x = x[None]
    b = x.shape[0]
    sample_ids = list(range(b)) if sample_ids is None else [int(s) for s in sample_ids]
    gens = [sample_generator(seed, s) for s in sample_ids]

    with torch.no_grad():
        prior0, post0 = presences(model, x)
    clean_pred = _labels(classifier, prior0, post0)
    mask = target_mask(prior0)
    active = mask.any(-1).numpy()
    w = to_w(x, cfg.eps_clamp)

    best_norm = np.full(b, math.inf)
    best_img = x.detach().clone()
    best_label = clean_pred.copy()
    alpha = np.full(b, float(cfg.alpha_init))
    ub = np.full(b, float(cfg.alpha_ub))
    lb = np.full(b, float(cfg.alpha_lb))
    idx = np.flatnonzero(active)
    if len(idx) == 0:
        return clean_pred, mask, active, best_norm, best_img, best_label

    xs, ws, ms = x[idx], w[idx], mask[idx]
    for rnd in range(cfg.n_outer):
        p = torch.stack([torch.rand(x.shape[1:], generator=gens[i], dtype=x.dtype) for i in idx])
        state = (torch.zeros_like(p), torch.zeros_like(p), 0)
        a = torch.as_tensor(alpha[idx], dtype=x.dtype)
        live = np.ones(len(idx), dtype=bool)
        succeeded = np.zeros(len(idx), dtype=bool)
        p.requires_grad_(True)
        x_adv, _ = from_w(ws, p, xs)
        prior, post = presences(model, x_adv)
        for j in range(cfg.n_inner):
            loss = l2(x_adv - xs) + a * (prior * ms).sum(-1)
            finite = torch.isfinite(loss).numpy()
            live &= finite
            (grad,) = torch.autograd.grad(torch.where(torch.isfinite(loss), loss, 0.0).sum(), p)
            with torch.no_grad():
                new_p, state = step(p.detach(), grad, state, cfg)
                keep = torch.as_tensor(live).view(-1, *([1] * (p.dim() - 1)))
                new_p = torch.where(keep, new_p, p.detach())
            p = new_p.requires_grad_(True)
            x_adv, _ = from_w(ws, p, xs)
            prior, post = presences(model, x_adv)
            labels = _labels(classifier, prior, post)
            with torch.no_grad():
                norms = l2(x_adv - xs).numpy()
            hit = live & (labels != clean_pred[idx]) & np.isfinite(norms)
            succeeded |= hit
            for n in np.flatnonzero(hit):
                i = idx[n]
                if candidate_log is not None:
                    candidate_log.append((sample_ids[i], rnd, j, float(norms[n])))
                if norms[n] < best_norm[i]:
                    best_norm[i] = float(norms[n])
                    best_img[i] = x_adv[n].detach()
                    best_label[i] = labels[n]
        alpha[idx], ub[idx], lb[idx] = update_alpha(alpha[idx], ub[idx], lb[idx], succeeded, cfg.alpha_blowup)
    return clean_pred, mask, active, best_norm, best_img, best_label


def run_evasion_attack(x, model, classifier, cfg=None, sample_ids=None, labels=None, seed=0,
                       candidate_log=None, sign_steps=False):
    """Optimizer attack on a batch ``x`` ([B, H, W] or [H, W]); one :class:`AttackResult` per sample.

    ``candidate_log`` (a list) receives ``(sample_id, round, inner_step, norm)``
    for every misclassified iterate, which lets tests check the minimum bookkeeping.
    ``sign_steps=True`` swaps Adam for the generator's sign-gradient update.
    """
    cfg = cfg or AttackConfig.evaluation()
    x = torch.as_tensor(x)
    if x.dim() == 2:
        x = x[None]
    ids = list(range(len(x))) if sample_ids is None else [int(s) for s in sample_ids]
    if hasattr(model, "eval"):
        model.eval()
    clean_pred, mask, active, norms, imgs, adv_labels = _run(
        x, model, classifier, cfg, sign_step if sign_steps else adam_step, ids, seed, candidate_log)
    results = []
    for i in range(len(x)):
        success = bool(np.isfinite(norms[i]))
        status = NO_ACTIVE_CAPSULE if not active[i] else (SUCCESS if success else FAILED)
        adv = imgs[i].detach().numpy()
        results.append(AttackResult(
            sample_id=ids[i],
            perturbation=adv - x[i].numpy(),
            adversarial=adv,
            l2_norm=float(norms[i]),
            success=success,
            status=status,
            target_set=tuple(int(k) for k in torch.nonzero(mask[i]).flatten()),
            predicted_label=int(clean_pred[i]),
            adv_label=int(adv_labels[i]),
            clean_label=-1 if labels is None else int(labels[i]),
        ))
    return results


def generate_training_adversarial(x, model, classifier, cfg=None, sample_ids=None, seed=0):
    """Sign-gradient generator: minimal-L2 adversarial batch, clean images where every round failed."""
    cfg = cfg or AttackConfig.training()
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        *_, imgs, _ = _run(torch.as_tensor(x), model, classifier, cfg, sign_step, sample_ids, seed, None)
    finally:
        if hasattr(model, "train"):
            model.train(was_training)
    return imgs.detach()


def write_records(results, path):
    """Write one CSV row per attacked sample."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RECORD_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in results:
            row = r.record() if isinstance(r, AttackResult) else r
            writer.writerow({**row, "l2_norm": repr(float(row["l2_norm"]))})
    return path


def read_records(path):
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(RECORD_FIELDS) - set(rows[0]):
        raise ValueError(f"{path} is missing columns {sorted(set(RECORD_FIELDS) - set(rows[0]))}")
    out = []
    for row in rows:
        out.append({
            "sample_id": int(row["sample_id"]),
            "clean_label": int(row["clean_label"]),
            "predicted_label": int(row["predicted_label"]),
            "adv_label": int(row["adv_label"]),
            "success": bool(int(row["success"])),
            "l2_norm": float(row["l2_norm"]),
            "status": row["status"],
        })
    return out
