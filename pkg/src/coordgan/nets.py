"""Learnable pieces: mapping nets, coordinate warping MLPs, Fourier embedding,
modulated synthesis network, image and patch discriminators, inversion encoder.

Layers use the equalized learning-rate convention: parameters are drawn from a
unit Gaussian and rescaled by ``lr_mul / sqrt(fan_in)`` at run time.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .coordspace import check_range, make_canonical

SQRT2 = math.sqrt(2.0)
DEMOD_EPS = 1e-8
# keeps tanh outputs strictly inside (-1, 1) even when float32 saturates
TANH_SHRINK = 1.0 - 1e-6


class FeatureDisabledError(RuntimeError):
    pass


def lrelu(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, 0.2) * SQRT2


class EqualLinear(nn.Module):
    def __init__(self, in_dim, out_dim, bias=True, bias_init=0.0, lr_mul=1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_dim,), float(bias_init))) if bias else None
        self.scale = lr_mul / math.sqrt(in_dim)
        self.lr_mul = lr_mul

    def forward(self, x):
        bias = self.bias * self.lr_mul if self.bias is not None else None
        return F.linear(x, self.weight * self.scale, bias)


class EqualConv2d(nn.Module):
    def __init__(self, in_ch, out_ch, kernel_size, stride=1, padding=0, bias=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_ch)) if bias else None
        self.scale = 1 / math.sqrt(in_ch * kernel_size ** 2)
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return F.conv2d(x, self.weight * self.scale, self.bias, stride=self.stride, padding=self.padding)


class MappingNetwork(nn.Module):
    """Pixel-normalised noise through a stack of leaky MLP layers."""

    def __init__(self, dim, depth, lr_mul=0.01):
        super().__init__()
        self.dim = dim
        self.layers = nn.ModuleList(EqualLinear(dim, dim, lr_mul=lr_mul) for _ in range(depth))

    def forward(self, z):
        if z.shape[-1] != self.dim:
            raise ValueError(f"mapping network expects dim {self.dim}, got {z.shape[-1]}")
        x = z * torch.rsqrt(z.pow(2).mean(-1, keepdim=True) + 1e-8)
        for layer in self.layers:
            x = lrelu(layer(x))
        return x


class CoordMLP(nn.Module):
    """Three-layer MLP on ``[coordinate, code]`` with a tanh head.

    Used both for canonical -> warped (warp) and warped -> canonical (backward).
    It is a function of the coordinate value only, never of the pixel index.
    """

    def __init__(self, code_dim, hidden, depth=3):
        super().__init__()
        dims = [2 + code_dim] + [hidden] * (depth - 1)
        self.hidden = nn.ModuleList(EqualLinear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.out = EqualLinear(hidden, 2)

    def forward(self, coords, code):
        # coords (B, H, W, 2), code (B, N)
        b, h, w, _ = coords.shape
        x = torch.cat([coords, code[:, None, None, :].expand(b, h, w, code.shape[-1])], dim=-1)
        for layer in self.hidden:
            x = lrelu(layer(x))
        out = torch.tanh(self.out(x)) * TANH_SHRINK
        return check_range(out, strict=True)


class FourierEmbedding(nn.Module):
    """1x1 convolution of the 2-channel coordinate map followed by ``sin``."""

    def __init__(self, dim, scale):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(dim, 2) * scale)
        self.bias = nn.Parameter((torch.rand(dim) * 2 - 1) * math.pi)

    def forward(self, coords):
        # (B, H, W, 2) -> (B, E, H, W)
        proj = coords @ self.weight.t() + self.bias
        return torch.sin(proj).permute(0, 3, 1, 2)


def modulated_conv(x, weight, styles, demodulate=True, padding=0, eps=DEMOD_EPS):
    """Per-sample convolution with kernels scaled by ``styles`` along the input axis.

    x (B, Cin, H, W); weight (Cout, Cin, k, k), already carrying any runtime
    scale; styles (B, Cin). No bias is added. Computed in the non-fused form
    (scale inputs, shared convolution, scale outputs), which equals convolving
    with the per-sample modulated and demodulated kernel.
    """
    b, cin = x.shape[:2]
    if styles.shape != (b, cin):
        raise ValueError(f"styles shape {tuple(styles.shape)} does not match input ({b}, {cin})")
    out = F.conv2d(x * styles[:, :, None, None], weight, padding=padding)
    if demodulate:
        # sum over (cin, k, k) of (w * s)^2 = s^2 @ sum_k w^2
        energy = styles.pow(2) @ weight.pow(2).sum(dim=(2, 3)).t()
        out = out * torch.rsqrt(energy + eps)[:, :, None, None]
    return out


def modulated_conv_reference(x, weight, styles, demodulate=True, padding=0, eps=DEMOD_EPS):
    """Grouped-convolution form with explicitly materialised per-sample kernels."""
    b, cin, h, w = x.shape
    cout = weight.shape[0]
    wmod = weight[None] * styles[:, None, :, None, None]
    if demodulate:
        wmod = wmod * torch.rsqrt(wmod.pow(2).sum(dim=(2, 3, 4), keepdim=True) + eps)
    out = F.conv2d(x.reshape(1, b * cin, h, w), wmod.reshape(b * cout, cin, *weight.shape[2:]),
                   padding=padding, groups=b)
    return out.reshape(b, cout, *out.shape[2:])


class ModulatedConv2d(nn.Module):
    def __init__(self, in_ch, out_ch, kernel_size, style_dim, demodulate=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel_size, kernel_size))
        self.scale = 1 / math.sqrt(in_ch * kernel_size ** 2)
        self.affine = EqualLinear(style_dim, in_ch, bias_init=1.0)
        self.demodulate = demodulate
        self.padding = kernel_size // 2

    def styles(self, w):
        return self.affine(w)

    def forward(self, x, w=None, styles=None):
        if styles is None:
            styles = self.styles(w)
        return modulated_conv(x, self.weight * self.scale, styles, self.demodulate, self.padding)


class SynthesisLayer(nn.Module):
    def __init__(self, in_ch, out_ch, kernel_size, style_dim):
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, out_ch, kernel_size, style_dim)
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x, w):
        return lrelu(self.conv(x, w) + self.bias[None, :, None, None])


class ToRGB(nn.Module):
    def __init__(self, in_ch, style_dim):
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, 3, 1, style_dim, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(3))

    def forward(self, x, w):
        return self.conv(x, w) + self.bias[None, :, None, None]


class Synthesis(nn.Module):
    """Modulated generator at constant resolution driven by a correspondence map.

    The Fourier embedding of the map feeds layer 1; the raw 2-channel map is
    concatenated to the input of every layer flagged in ``concat``; RGB is
    tapped after every second layer and summed. No output squashing.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.concat = cfg.concat_mask()
        self.num_layers = cfg.layers
        c, n, k = cfg.channels, cfg.latent_dim, cfg.kernel_size
        self.layers = nn.ModuleList()
        self.to_rgb = nn.ModuleDict()
        for i in range(cfg.layers):
            in_ch = (cfg.embed_dim if i == 0 else c) + (2 if self.concat[i] else 0)
            self.layers.append(SynthesisLayer(in_ch, c, k, n))
            if i % 2 == 1:
                self.to_rgb[str(i)] = ToRGB(c, n)

    def forward(self, embedding, coords, w_t, concat_coords=None):
        """``concat_coords`` replaces the map fed to layers 2..L (ablation checks only)."""
        ws = self._layer_codes(w_t)
        grid = coords.permute(0, 3, 1, 2)
        late = grid if concat_coords is None else concat_coords.permute(0, 3, 1, 2)
        x, rgb = embedding, None
        for i, layer in enumerate(self.layers):
            if self.concat[i]:
                x = torch.cat([x, grid if i == 0 else late], dim=1)
            x = layer(x, ws[i])
            if str(i) in self.to_rgb:
                y = self.to_rgb[str(i)](x, ws[i])
                rgb = y if rgb is None else rgb + y
        return rgb

    def _layer_codes(self, w_t):
        if w_t.dim() == 2:
            return [w_t] * self.num_layers
        if w_t.shape[1] != self.num_layers:
            raise ValueError(f"w+ needs {self.num_layers} layer codes, got {w_t.shape[1]}")
        return list(w_t.unbind(1))


class CoordGenerator(nn.Module):
    """Structure branch (mapper + warp MLP) and texture branch (mapper) feeding the synthesis net."""

    def __init__(self, cfg: ModelConfig, mapping_lr_mul=0.01):
        super().__init__()
        self.cfg = cfg
        n = cfg.latent_dim
        self.structure_mapper = MappingNetwork(n, cfg.mapping_depth, mapping_lr_mul)
        self.texture_mapper = MappingNetwork(n, cfg.mapping_depth, mapping_lr_mul)
        self.warp_mlp = CoordMLP(n, cfg.warp_hidden)
        self.backward_mlp = CoordMLP(n, cfg.warp_hidden) if cfg.backward_mlp else None
        self.posenc = FourierEmbedding(cfg.embed_dim, cfg.posenc_scale)
        self.synthesis = Synthesis(cfg)
        self.register_buffer("canonical", make_canonical(cfg.resolution, cfg.resolution), persistent=False)

    def canonical_batch(self, b):
        return self.canonical.expand(b, *self.canonical.shape)

    def warp(self, w_s):
        return self.warp_mlp(self.canonical_batch(w_s.shape[0]), w_s)

    def unwarp(self, c_warped, w_s):
        if self.backward_mlp is None:
            raise FeatureDisabledError("backward MLP is disabled (set model.backward_mlp = true)")
        return self.backward_mlp(c_warped, w_s)

    def render(self, c_warped, w_t, concat_coords=None):
        r = self.cfg.resolution
        if c_warped.shape[1:3] != (r, r):
            raise ValueError(f"correspondence map must be {r}x{r}, got {tuple(c_warped.shape[1:3])}")
        return self.synthesis(self.posenc(c_warped), c_warped, w_t, concat_coords)

    def forward(self, z_s, z_t):
        w_s = self.structure_mapper(z_s)
        coords = self.warp(w_s)
        img = self.render(coords, self.texture_mapper(z_t))
        return img, coords, w_s


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, down=True):
        super().__init__()
        self.conv1 = EqualConv2d(in_ch, in_ch, 3, padding=1)
        self.conv2 = EqualConv2d(in_ch, out_ch, 3, padding=1)
        self.skip = EqualConv2d(in_ch, out_ch, 1, bias=False)
        self.down = down

    def forward(self, x):
        y = lrelu(self.conv1(x))
        y = lrelu(self.conv2(y))
        s = self.skip(x)
        if self.down:
            y, s = F.avg_pool2d(y, 2), F.avg_pool2d(s, 2)
        return (y + s) / SQRT2


def _widths(base, n, cap):
    return [min(base * 2 ** i, cap) for i in range(n + 1)]


class Discriminator(nn.Module):
    def __init__(self, resolution, channels):
        super().__init__()
        n_down = int(math.log2(resolution)) - 2  # down to 4x4
        ch = _widths(channels, n_down, channels * 4)
        self.from_rgb = EqualConv2d(3, ch[0], 1)
        self.blocks = nn.Sequential(*[ResBlock(a, b) for a, b in zip(ch[:-1], ch[1:])])
        self.conv = EqualConv2d(ch[-1], ch[-1], 3, padding=1)
        self.fc = EqualLinear(ch[-1] * 16, ch[-1])
        self.head = EqualLinear(ch[-1], 1)

    def forward(self, x):
        x = self.blocks(lrelu(self.from_rgb(x)))
        x = lrelu(self.conv(x)).flatten(1)
        return self.head(lrelu(self.fc(x))).squeeze(-1)


class PatchDiscriminator(nn.Module):
    """Scores whether a query patch shares texture with a set of reference patches.

    Patch features come from a shared extractor; reference features are
    mean-pooled and concatenated with the query feature before the classifier.
    """

    def __init__(self, patch_size, channels):
        super().__init__()
        n_down = max(int(math.log2(patch_size)) - 1, 1)  # down to 2x2
        ch = _widths(channels, n_down, channels * 4)
        self.from_rgb = EqualConv2d(3, ch[0], 1)
        self.blocks = nn.Sequential(*[ResBlock(a, b) for a, b in zip(ch[:-1], ch[1:])],
                                    ResBlock(ch[-1], ch[-1], down=False))
        self.conv = EqualConv2d(ch[-1], ch[-1], 3, padding=1)
        side = patch_size // 2 ** n_down
        self.feat_dim = ch[-1] * side * side
        self.classifier = nn.Sequential(EqualLinear(2 * self.feat_dim, ch[-1]), nn.LeakyReLU(0.2),
                                        EqualLinear(ch[-1], ch[-1]), nn.LeakyReLU(0.2))
        self.head = EqualLinear(ch[-1], 1)

    def features(self, patches):
        lead = patches.shape[:-3]
        x = self.blocks(lrelu(self.from_rgb(patches.flatten(0, -4))))
        return lrelu(self.conv(x)).flatten(1).reshape(*lead, -1)

    def forward(self, refs, queries):
        """refs (B, R, 3, p, p), queries (B, Q, 3, p, p) -> logits (B, Q)."""
        if refs.shape[1] < 1:
            raise ValueError("patch discriminator needs at least one reference patch")
        ref = self.features(refs).mean(dim=1, keepdim=True)
        q = self.features(queries)
        h = torch.cat([ref.expand_as(q), q], dim=-1)
        return self.head(self.classifier(h)).squeeze(-1)


class Encoder(nn.Module):
    """Image -> (structure code, one texture code per synthesis layer)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.resolution = cfg.resolution
        self.num_layers = cfg.layers
        ch = _widths(cfg.enc_channels, 4, cfg.enc_channels * 4)
        self.from_rgb = EqualConv2d(3, ch[0], 1)
        self.trunk = nn.Sequential(*[ResBlock(a, b) for a, b in zip(ch[:-1], ch[1:])])
        side = cfg.resolution // 16
        c = ch[-1]
        self.struct_conv = nn.Sequential(EqualConv2d(c, c // 2, 1), nn.LeakyReLU(0.2),
                                         EqualConv2d(c // 2, c // 4, 1))
        self.struct_fc = EqualLinear(c // 4 * side * side, cfg.latent_dim)
        self.tex_conv = nn.Sequential(EqualConv2d(c, c, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
                                      EqualConv2d(c, c, 1))
        self.tex_heads = nn.ModuleList(EqualLinear(c, cfg.latent_dim) for _ in range(cfg.layers))

    def forward(self, img):
        if img.shape[-2:] != (self.resolution, self.resolution):
            raise ValueError(f"encoder expects {self.resolution}x{self.resolution} images, got {tuple(img.shape[-2:])}")
        h = self.trunk(lrelu(self.from_rgb(img)))
        w_s = self.struct_fc(self.struct_conv(h).flatten(1))
        t = F.leaky_relu(self.tex_conv(h), 0.2).mean(dim=(2, 3))
        w_plus = torch.stack([head(t) for head in self.tex_heads], dim=1)
        return w_s, w_plus


class Models(nn.Module):
    """Every parameter group of a run, addressable by name."""

    GROUPS = ("structure_mapper", "texture_mapper", "warp_mlp", "backward_mlp", "posenc",
              "synthesis", "discriminator", "patch_discriminator", "encoder")

    def __init__(self, cfg: ModelConfig, mapping_lr_mul=0.01):
        super().__init__()
        self.cfg = cfg
        self.generator = CoordGenerator(cfg, mapping_lr_mul)
        self.discriminator = Discriminator(cfg.resolution, cfg.d_channels)
        self.patch_size = cfg.resolution // 4
        self.patch_discriminator = PatchDiscriminator(self.patch_size, cfg.patch_channels)
        self.encoder = Encoder(cfg)

    def group(self, name) -> nn.Module | None:
        if name in ("discriminator", "patch_discriminator", "encoder"):
            return getattr(self, name)
        return getattr(self.generator, name)


def build_models(cfg: ModelConfig, seed: int, mapping_lr_mul=0.01) -> Models:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Models(cfg, mapping_lr_mul)
