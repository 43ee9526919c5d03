import math

import torch
import torch.nn.functional as F
from torch import nn


class SinusoidalPosEmb(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.dim = dim

    def forward(self, k):
        half = self.dim // 2
        freqs = torch.exp(torch.arange(half, device=k.device) * (-math.log(10000.0) / (half - 1)))
        args = k.float()[:, None] * freqs[None, :]
        return torch.cat([args.sin(), args.cos()], dim=-1)


class Conv1dBlock(nn.Module):
    def __init__(self, in_ch, out_ch, kernel_size, groups=8):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv1d(in_ch, out_ch, kernel_size, padding=kernel_size // 2),
            nn.GroupNorm(groups, out_ch),
            nn.Mish(),
        )

    def forward(self, x):
        return self.block(x)


class ResidualTemporalBlock(nn.Module):
    def __init__(self, in_ch, out_ch, embed_dim, kernel_size=5):
        super().__init__()
        self.blocks = nn.ModuleList([
            Conv1dBlock(in_ch, out_ch, kernel_size),
            Conv1dBlock(out_ch, out_ch, kernel_size),
        ])
        self.step_mlp = nn.Sequential(nn.Mish(), nn.Linear(embed_dim, out_ch))
        self.residual = nn.Conv1d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        out = self.blocks[0](x) + self.step_mlp(emb)[:, :, None]
        out = self.blocks[1](out)
        return out + self.residual(x)


class TemporalUnet(nn.Module):
    """x0-predicting denoiser over (batch, features, time).

    Three resolution levels; the time axis is right-padded internally to a
    multiple of 4 and cropped back, so any ``T_max`` works.
    """

    def __init__(self, num_features, dim=32, dim_mults=(1, 2, 4), kernel_size=5):
        super().__init__()
        self.num_features = num_features
        self.config = {"num_features": num_features, "dim": dim, "dim_mults": list(dim_mults),
                       "kernel_size": kernel_size}
        dims = [num_features] + [dim * m for m in dim_mults]
        in_out = list(zip(dims[:-1], dims[1:]))
        self.levels = len(in_out)
        embed_dim = dim * 4
        self.step_mlp = nn.Sequential(
            SinusoidalPosEmb(dim), nn.Linear(dim, embed_dim), nn.Mish(), nn.Linear(embed_dim, dim)
        )

        self.downs = nn.ModuleList()
        for i, (d_in, d_out) in enumerate(in_out):
            last = i == len(in_out) - 1
            self.downs.append(nn.ModuleList([
                ResidualTemporalBlock(d_in, d_out, dim, kernel_size),
                ResidualTemporalBlock(d_out, d_out, dim, kernel_size),
                nn.Conv1d(d_out, d_out, 3, stride=2, padding=1) if not last else nn.Identity(),
            ]))
        mid = dims[-1]
        self.mid1 = ResidualTemporalBlock(mid, mid, dim, kernel_size)
        self.mid2 = ResidualTemporalBlock(mid, mid, dim, kernel_size)

        self.ups = nn.ModuleList()
        for i, (d_in, d_out) in enumerate(reversed(in_out[1:])):
            self.ups.append(nn.ModuleList([
                ResidualTemporalBlock(d_out * 2, d_in, dim, kernel_size),
                ResidualTemporalBlock(d_in, d_in, dim, kernel_size),
                nn.ConvTranspose1d(d_in, d_in, 4, stride=2, padding=1),
            ]))
        self.final = nn.Sequential(
            Conv1dBlock(dim, dim, kernel_size), nn.Conv1d(dim, num_features, 1)
        )

    def forward(self, x, k):
        T = x.shape[-1]
        mult = 2 ** (self.levels - 1)
        pad = (-T) % mult
        if pad:
            x = F.pad(x, (0, pad))
        emb = self.step_mlp(k)
        skips = []
        for res1, res2, down in self.downs:
            x = res2(res1(x, emb), emb)
            skips.append(x)
            x = down(x)
        x = self.mid2(self.mid1(x, emb), emb)
        for res1, res2, up in self.ups:
            x = torch.cat([x, skips.pop()], dim=1)
            x = res2(res1(x, emb), emb)
            x = up(x)
        x = self.final(x)
        return x[..., :T]
