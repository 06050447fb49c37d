"""Set Transformer blocks (SAB / PMA) used by the object capsule encoder."""
import math

import torch
from torch import nn


class MultiheadAttentionBlock(nn.Module):
    """``MAB(X, Y) = LN(H + rFF(H))`` with ``H = LN(X + Attention(X, Y, Y))``.

    ``key_bias`` ([B, Ny]) is added to the attention logits; passing the log of
    part presences makes absent parts invisible to the set encoder.
    """

    def __init__(self, dim_q, dim_kv, dim, n_heads):
        super().__init__()
        if dim % n_heads:
            raise ValueError("hidden size must be divisible by the number of heads")
        self.n_heads = n_heads
        self.q = nn.Linear(dim_q, dim)
        self.k = nn.Linear(dim_kv, dim)
        self.v = nn.Linear(dim_kv, dim)
        self.out = nn.Linear(dim, dim)
        self.ff = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, dim))
        self.ln1 = nn.LayerNorm(dim)
        self.ln2 = nn.LayerNorm(dim)

    def forward(self, x, y, key_bias=None):
        b, nq, _ = x.shape
        nk = y.shape[1]
        h = self.n_heads
        q = self.q(x).view(b, nq, h, -1).transpose(1, 2)
        k = self.k(y).view(b, nk, h, -1).transpose(1, 2)
        v = self.v(y).view(b, nk, h, -1).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if key_bias is not None:
            logits = logits + key_bias[:, None, None, :]
        att = torch.softmax(logits, dim=-1) @ v
        att = att.transpose(1, 2).reshape(b, nq, -1)
        hid = self.ln1(self.q(x) + self.out(att))
        return self.ln2(hid + self.ff(hid))


class SetTransformer(nn.Module):
    """Permutation-invariant encoder: ``n_layers`` SABs then PMA with ``n_outputs`` seeds."""

    def __init__(self, dim_input, n_layers, n_heads, n_hidden, n_output_dims, n_outputs):
        super().__init__()
        self.embed = nn.Linear(dim_input, n_hidden)
        self.layers = nn.ModuleList(
            MultiheadAttentionBlock(n_hidden, n_hidden, n_hidden, n_heads)
            for _ in range(n_layers))
        self.seeds = nn.Parameter(torch.randn(1, n_outputs, n_hidden) / math.sqrt(n_hidden))
        self.pool = MultiheadAttentionBlock(n_hidden, n_hidden, n_hidden, n_heads)
        self.head = nn.Linear(n_hidden, n_output_dims)

    def forward(self, x, key_bias=None):
        h = self.embed(x)
        for layer in self.layers:
            h = layer(h, h, key_bias)
        seeds = self.seeds.expand(x.shape[0], -1, -1)
        return self.head(self.pool(seeds, h, key_bias))
