"""Part capsule autoencoder: CNN part encoder and affine template decoder."""
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from . import geometry


@dataclass
class PartCapsuleSet:
    pose: torch.Tensor        # [B, M, 6]
    presence: torch.Tensor    # [B, M] in [0, 1]
    attributes: torch.Tensor  # [B, M, n]

    def matrices(self):
        return geometry.pose_to_matrix(self.pose)


def uniform_noise(shape, scale, generator=None, dtype=torch.float32):
    """Uniform noise in ``[-scale, scale]`` drawn from ``generator``."""
    u = torch.rand(shape, generator=generator, dtype=dtype)
    return (2.0 * u - 1.0) * scale


class PartEncoder(nn.Module):
    """CNN -> per-capsule attention pooling -> (pose, presence, attributes)."""

    def __init__(self, cnn_layers, num_parts, attribute_dim, noise_scale):
        super().__init__()
        convs = []
        c_in = 1
        for channels, stride in cnn_layers:
            conv = nn.Conv2d(c_in, channels, 3, stride=stride, padding=1)
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)
            convs += [conv, nn.ReLU()]
            c_in = channels
        self.cnn = nn.Sequential(*convs)
        self.num_parts = num_parts
        self.attribute_dim = attribute_dim
        self.noise_scale = noise_scale
        # pose 6, presence logit 1, attributes n, attention logit 1
        self.split = (6, 1, attribute_dim, 1)
        self.head = nn.Conv2d(c_in, num_parts * sum(self.split), 1)
        self._spread_initial_translations()

    def _spread_initial_translations(self, extent=0.5):
        # start the parts on a grid over the central canvas instead of stacked at the center
        m = self.num_parts
        side = math.ceil(math.sqrt(m))
        ticks = torch.linspace(-extent, extent, side) if side > 1 else torch.zeros(1)
        grid = torch.cartesian_prod(ticks, ticks)[:m]
        bias = self.head.bias.data.view(m, sum(self.split))
        bias[:, 4:6] = torch.atanh(grid)

    def forward(self, images, training=False, generator=None):
        b = images.shape[0]
        feat = self.head(self.cnn(images[:, None]))
        feat = feat.view(b, self.num_parts, sum(self.split), -1)
        pose_raw, pres_logit, attrs, att = torch.split(feat, self.split, dim=2)
        weights = torch.softmax(att, dim=-1)
        pose_raw = (pose_raw * weights).sum(-1)
        pres_logit = (pres_logit * weights).sum(-1).squeeze(-1)
        attrs = (attrs * weights).sum(-1)
        if training and self.noise_scale > 0:
            pres_logit = pres_logit + uniform_noise(pres_logit.shape, self.noise_scale,
                                                    generator, pres_logit.dtype)
        return PartCapsuleSet(
            pose=geometry.decode_pose(pose_raw),
            presence=torch.sigmoid(pres_logit),
            attributes=attrs,
        )


TEMPLATE_GAIN = 10.0


def stroke_templates(num_parts, size, width=1.2):
    """Initial template logits: one blurred line segment per part at a random angle."""
    coords = torch.linspace(-1.0, 1.0, size)
    yy, xx = torch.meshgrid(coords, coords, indexing="ij")
    angles = torch.rand(num_parts) * math.pi
    lengths = 0.4 + 0.5 * torch.rand(num_parts)
    logits = []
    for angle, length in zip(angles, lengths):
        c, s = torch.cos(angle), torch.sin(angle)
        along = xx * c + yy * s
        across = -xx * s + yy * c
        overshoot = (along.abs() - length).clamp(min=0.0)
        dist = torch.sqrt(across ** 2 + overshoot ** 2) * (size / 2.0)
        logits.append(4.0 - 4.0 * dist / width)
    return torch.stack(logits).clamp(-6.0, 6.0) + 0.1 * torch.randn(num_parts, size, size)


class TemplateDecoder(nn.Module):
    """Warp one learned template per part onto the canvas and max-composite them.

    Under the identity pose template pixel ``(i, j)`` lands exactly on canvas
    pixel ``(i + o, j + o)`` with ``o = (canvas - template) // 2``.
    """

    def __init__(self, num_parts, template_size, canvas_size):
        super().__init__()
        self.template_size = template_size
        self.canvas_size = canvas_size
        self.template_logits = nn.Parameter(stroke_templates(num_parts, template_size) / TEMPLATE_GAIN)
        offset = (canvas_size - template_size) // 2
        self.center = (2 * offset + template_size) / canvas_size - 1.0

    @property
    def templates(self):
        return torch.sigmoid(TEMPLATE_GAIN * self.template_logits)

    def placement(self, pose):
        """Template-normalized -> canvas-normalized affine for each part, ``[..., 2, 3]``."""
        mat = geometry.pose_to_matrix(pose)
        ratio = self.template_size / self.canvas_size
        linear = mat[..., :2] * ratio
        shift = mat[..., 2:] + self.center
        return torch.cat([linear, shift], dim=-1)

    def warp(self, pose, templates=None):
        """``[B, M, 6]`` poses -> warped templates ``[B, M, H, W]``."""
        if templates is None:
            templates = self.templates
        b, m, _ = pose.shape
        theta = geometry.invert_affine(self.placement(pose)).reshape(b * m, 2, 3)
        c = self.canvas_size
        grid = F.affine_grid(theta, (b * m, 1, c, c), align_corners=False)
        src = templates.to(pose.dtype)[None].expand(b, -1, -1, -1).reshape(b * m, 1, *templates.shape[-2:])
        out = F.grid_sample(src, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
        return out.view(b, m, c, c)

    def forward(self, parts):
        warped = self.warp(parts.pose)
        composite = (parts.presence[..., None, None] * warped).amax(dim=1)
        return composite.clamp(0.0, 1.0)
