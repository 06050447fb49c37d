"""Object capsule autoencoder: a Set Transformer over part capsules.

Each object capsule ``k`` emits a prior presence, an object-viewer pose ``OV_k``
and a part-presence logit per part. Part ``m`` is predicted at ``OV_k @ OP_km``
where the object-part poses ``OP_km`` are learned constants. The posterior presence ``[B, K, M]`` is the share of
part ``m`` explained by object ``k`` (a softmax over objects of
``log prior_k + log sigmoid(logit_km) - |pose_m - OV_k OP_km|^2 / 2 sigma^2``)
scaled by the part presence.
"""
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from . import geometry
from .pcae import uniform_noise
from .set_transformer import SetTransformer

_EPS = 1e-6
OUTPUT_INIT_SCALE = 1.0


@dataclass
class ObjectCapsuleOutput:
    prior_presence: torch.Tensor      # [B, K]
    posterior_presence: torch.Tensor  # [B, K, M]
    pose_error: torch.Tensor          # [B, K, M] squared distance of predicted vs. actual part pose
    object_pose: torch.Tensor         # [B, K, 6]


class ObjectCapsules(nn.Module):
    def __init__(self, num_parts, num_objects, attribute_dim, layout, noise_scale, pose_sigma):
        super().__init__()
        n_layers, n_heads, n_hidden, n_out = layout
        self.num_parts = num_parts
        self.num_objects = num_objects
        self.noise_scale = noise_scale
        self.pose_sigma = pose_sigma
        self.encoder = SetTransformer(7 + attribute_dim, n_layers, n_heads, n_hidden, n_out, num_objects)
        self.split = (6, 1, num_parts)
        d_out = sum(self.split)
        self.weight = nn.Parameter(torch.randn(num_objects, n_out, d_out) / math.sqrt(n_out) * OUTPUT_INIT_SCALE)
        self.bias = nn.Parameter(torch.zeros(num_objects, d_out))
        self.static_op = nn.Parameter(torch.randn(num_objects, num_parts, 6) * 0.5)

    def forward(self, parts, training=False, generator=None):
        inputs = torch.cat([parts.pose, parts.presence[..., None], parts.attributes], dim=-1)
        key_bias = torch.log(parts.presence + _EPS)
        h = self.encoder(inputs, key_bias)                         # [B, K, n_out]
        raw = torch.einsum("bkd,kde->bke", h, self.weight) + self.bias
        ov_raw, pres_logit, part_logits = torch.split(raw, self.split, dim=-1)
        pres_logit = pres_logit.squeeze(-1)
        if training and self.noise_scale > 0:
            pres_logit = pres_logit + uniform_noise(pres_logit.shape, self.noise_scale,
                                                    generator, pres_logit.dtype)
        prior = torch.sigmoid(pres_logit)

        ov_pose = geometry.decode_pose(ov_raw)
        op_pose = geometry.decode_pose(self.static_op)
        predicted = geometry.compose(
            geometry.pose_to_matrix(ov_pose)[:, :, None], geometry.pose_to_matrix(op_pose)[None])
        actual = parts.matrices()[:, None]                         # [B, 1, M, 2, 3]
        pose_error = ((predicted - actual) ** 2).sum(dim=(-1, -2))  # [B, K, M]

        logits = (torch.log(prior + _EPS)[..., None] + F.logsigmoid(part_logits)
                  - pose_error / (2.0 * self.pose_sigma ** 2))
        responsibility = torch.softmax(logits, dim=1)
        posterior = responsibility * parts.presence[:, None, :]
        return ObjectCapsuleOutput(
            prior_presence=prior,
            posterior_presence=posterior,
            pose_error=pose_error,
            object_pose=ov_pose,
        )
