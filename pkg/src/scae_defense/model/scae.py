"""Stacked capsule autoencoder: model container, encoding and the split loss."""
from dataclasses import dataclass

import torch
from torch import nn

from ..config import ScaeConfig
from .ocae import ObjectCapsules
from .pcae import PartCapsuleSet, PartEncoder, TemplateDecoder

_EPS = 1e-8


class ShapeError(ValueError):
    pass


@dataclass
class ScaeOutputs:
    parts: PartCapsuleSet
    prior_presence: torch.Tensor      # [B, K]
    posterior_presence: torch.Tensor  # [B, K, M]
    reconstruction: torch.Tensor      # [B, H, W]
    pose_error: torch.Tensor          # [B, K, M]


@dataclass
class LossBreakdown:
    rec: torch.Tensor
    non_rec: torch.Tensor
    total: torch.Tensor
    part_pose: torch.Tensor
    prior_sparsity: torch.Tensor
    posterior_sparsity: torch.Tensor

    def as_floats(self):
        return {k: float(v.detach()) for k, v in vars(self).items()}


class ScaeModel(nn.Module):
    def __init__(self, config: ScaeConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.part_encoder = PartEncoder(
            config.cnn_layers, config.num_part_capsules, config.attribute_dim, config.part_noise_scale)
        self.decoder = TemplateDecoder(
            config.num_part_capsules, config.template_size, config.canvas_size)
        self.object_capsules = ObjectCapsules(
            config.num_part_capsules, config.num_object_capsules, config.attribute_dim,
            config.set_transformer_layout, config.object_noise_scale, config.pose_sigma)

    def forward(self, images, training=False, generator=None):
        return encode(self, images, training=training, rng=generator)

    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())


def init_model(config: ScaeConfig, seed: int) -> ScaeModel:
    """Build a model whose parameters depend only on ``config`` and ``seed``."""
    state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        model = ScaeModel(config)
    finally:
        torch.random.set_rng_state(state)
    return model


def encode(model: ScaeModel, images, training=False, rng=None) -> ScaeOutputs:
    """Run the full SCAE on ``images`` ([B, H, W], values in [0, 1]).

    With ``training=True`` uniform noise is injected into the part and object
    presence logits, drawn from ``rng`` (a ``torch.Generator``).
    """
    cfg = model.config
    if images.dim() != 3 or images.shape[1:] != (cfg.canvas_size, cfg.canvas_size):
        raise ShapeError(
            f"expected images of shape [B, {cfg.canvas_size}, {cfg.canvas_size}], got {tuple(images.shape)}")
    parts = model.part_encoder(images, training=training, generator=rng)
    objects = model.object_capsules(parts, training=training, generator=rng)
    return ScaeOutputs(
        parts=parts,
        prior_presence=objects.prior_presence,
        posterior_presence=objects.posterior_presence,
        reconstruction=model.decoder(parts),
        pose_error=objects.pose_error,
    )


def encode_presences(model: ScaeModel, images):
    """Deterministic prior ``[B, K]`` and posterior ``[B, K, M]`` presences, skipping the decoder."""
    parts = model.part_encoder(images)
    objects = model.object_capsules(parts)
    return objects.prior_presence, objects.posterior_presence


def reconstruct(model: ScaeModel, parts: PartCapsuleSet):
    return model.decoder(parts)


def capsule_entropy(presence):
    """Within-example entropy minus between-example entropy of ``[B, K]`` presences.

    Low values mean each example activates few capsules while the batch as a
    whole spreads over all of them.
    """
    q = presence / (presence.sum(dim=-1, keepdim=True) + _EPS)
    within = -(q * torch.log(q + _EPS)).sum(-1).mean()
    q_mean = q.mean(0)
    between = -(q_mean * torch.log(q_mean + _EPS)).sum()
    return within - between


def presence_mass_penalty(presence, cfg):
    """Squared gap between the summed presence of an example and ``K / num_classes``."""
    target = cfg.num_object_capsules / cfg.num_classes
    return ((presence.sum(-1) - target) ** 2).mean()


def reconstruction_loss(reconstruction, target):
    """Batch mean of the squared L2 image distance."""
    return ((reconstruction - target) ** 2).flatten(1).sum(-1).mean()


def compute_loss(model: ScaeModel, x, x_target, outputs: ScaeOutputs) -> LossBreakdown:
    """Split loss: reconstruction against ``x_target`` plus every other term computed on ``x``."""
    if x.shape != x_target.shape:
        raise ShapeError(f"input {tuple(x.shape)} and target {tuple(x_target.shape)} differ in shape")
    cfg = model.config
    rec = reconstruction_loss(outputs.reconstruction, x_target)

    # prior x posterior weights, normalized over objects so every present part
    # is paid for by the objects that are actually present
    joint = outputs.prior_presence[..., None] * outputs.posterior_presence
    weights = joint / (joint.sum(dim=1, keepdim=True) + _EPS) * outputs.parts.presence[:, None, :]
    part_pose = (weights * outputs.pose_error).sum(dim=(1, 2)).mean()
    prior_sparsity = (capsule_entropy(outputs.prior_presence)
                      + cfg.prior_mass_weight * presence_mass_penalty(outputs.prior_presence, cfg))
    posterior_sparsity = capsule_entropy(outputs.posterior_presence.sum(-1))

    non_rec = (cfg.part_pose_weight * part_pose
               + cfg.prior_sparsity_weight * prior_sparsity
               + cfg.posterior_sparsity_weight * posterior_sparsity)
    return LossBreakdown(
        rec=rec,
        non_rec=non_rec,
        total=rec + non_rec,
        part_pose=part_pose,
        prior_sparsity=prior_sparsity,
        posterior_sparsity=posterior_sparsity,
    )
