"""Training objectives: perceptual distance, swap/warp/chamfer losses, adversarial terms, R1."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import LossWeights
from .coordspace import chamfer_to_canonical, warp_image

PERCEPTUAL_SEED = 20220301
# smoothing of the edge magnitude, and the floor of the channel normalisation;
# the floor keeps sensor-level noise in flat regions from being blown up to unit length
EDGE_DELTA = 1e-3
NORM_EPS = 1e-2


class PerceptualExtractor(nn.Module):
    """Frozen, seed-fixed random convolutional pyramid over colour-blind edge energy.

    Stage one applies zero-mean oriented kernels to each colour channel and
    sums a smooth magnitude over the channels, so flat regions give zero and an
    edge responds by orientation and position, not by the colours meeting at
    it. Later stages are random stride-2 convolutions. Features at each stage
    are unit-normalised across channels before being compared, in the style of
    learned perceptual metrics. Everything is smooth, so finite-difference
    checks through the distance are well posed.
    """

    def __init__(self, widths=(16, 32, 64), seed=PERCEPTUAL_SEED, delta=EDGE_DELTA):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        k = torch.randn(widths[0], 1, 3, 3, generator=g)
        k = k - k.mean(dim=(2, 3), keepdim=True)
        k = k / k.flatten(1).norm(dim=1)[:, None, None, None]
        self.weights = nn.ParameterList([nn.Parameter(k, requires_grad=False)])
        for cin, cout in zip(widths[:-1], widths[1:]):
            w = torch.randn(cout, cin, 3, 3, generator=g) / math.sqrt(cin * 9)
            self.weights.append(nn.Parameter(w, requires_grad=False))
        self.delta = delta
        self.layer_weights = [1.0] * len(widths)

    def forward(self, x):
        b, c, h, w = x.shape
        k = self.weights[0].to(x.dtype)
        r = F.conv2d(x.reshape(b * c, 1, h, w), k, padding=1).reshape(b, c, -1, h, w)
        f = (torch.sqrt(r.pow(2) + self.delta) - math.sqrt(self.delta)).sum(1)
        feats = [f]
        for wt in self.weights[1:]:
            f = F.silu(F.conv2d(f, wt.to(x.dtype), stride=2, padding=1))
            feats.append(f)
        return feats


def _unit(f, eps=NORM_EPS):
    return f / torch.sqrt(f.pow(2).sum(dim=1, keepdim=True) + eps)


def perceptual_distance(x1, x2, extractor: PerceptualExtractor, reduce=True):
    if x1.shape != x2.shape:
        raise ValueError(f"perceptual distance needs equal shapes, got {tuple(x1.shape)} vs {tuple(x2.shape)}")
    f1, f2 = extractor(x1), extractor(x2)
    per_layer = [wt * (_unit(a) - _unit(b)).pow(2).sum(1).mean(dim=(1, 2))
                 for wt, a, b in zip(extractor.layer_weights, f1, f2)]
    d = torch.stack(per_layer).mean(0)
    return d.mean() if reduce else d


# -- adversarial -------------------------------------------------------------------

def gan_losses(d_logits_real, d_logits_fake):
    """Non-saturating logistic losses -> (generator term, discriminator term)."""
    g_term = F.softplus(-d_logits_fake).mean()
    d_term = F.softplus(-d_logits_real).mean() + F.softplus(d_logits_fake).mean()
    return g_term, d_term


def r1_penalty(discriminator, *inputs):
    """Half the batch-mean squared norm of d(logits)/d(inputs) at real samples."""
    inputs = [x.detach().requires_grad_(True) for x in inputs]
    logits = discriminator(*inputs)
    grads = torch.autograd.grad(logits.sum(), inputs, create_graph=True)
    sq = sum(g.pow(2).flatten(1).sum(1) for g in grads)
    return 0.5 * sq.mean()


def lazy_r1_weight(step: int, interval: int, gamma: float) -> float:
    """Weight applied to R1 at ``step``: ``gamma * interval`` on every ``interval``-th step, else 0."""
    return gamma * interval if step % interval == 0 else 0.0


# -- patches -----------------------------------------------------------------------

def crop_patches(images, n, generator, out_size, min_frac=1 / 8, max_frac=1 / 4):
    """Random square-ish crops, each side 1/8..1/4 of the image, resized to ``out_size``.

    Returns patches (B, n, C, out, out) and boxes (B, n, 4) as pixel
    ``(left, top, width, height)``.
    """
    b, c, h, w = images.shape
    dev, dt = images.device, images.dtype
    u = torch.rand(b, n, 4, generator=generator, dtype=torch.float64)
    cw = (min_frac + (max_frac - min_frac) * u[..., 0]) * w
    ch = (min_frac + (max_frac - min_frac) * u[..., 1]) * h
    left = u[..., 2] * (w - cw)
    top = u[..., 3] * (h - ch)
    # affine_grid maps [-1, 1] output to input; align_corners=False convention
    sx, sy = cw / w, ch / h
    tx = (left + cw / 2) / w * 2 - 1
    ty = (top + ch / 2) / h * 2 - 1
    theta = torch.zeros(b * n, 2, 3, dtype=torch.float64)
    theta[:, 0, 0] = sx.flatten()
    theta[:, 0, 2] = tx.flatten()
    theta[:, 1, 1] = sy.flatten()
    theta[:, 1, 2] = ty.flatten()
    grid = F.affine_grid(theta.to(dt), (b * n, c, out_size, out_size), align_corners=False).to(dev)
    src = images.unsqueeze(1).expand(b, n, c, h, w).reshape(b * n, c, h, w)
    patches = F.grid_sample(src, grid, mode="bilinear", padding_mode="border", align_corners=False)
    boxes = torch.stack([left, top, cw, ch], dim=-1)
    return patches.reshape(b, n, c, out_size, out_size), boxes


@dataclass
class PatchSample:
    refs: torch.Tensor
    real: torch.Tensor
    fake: torch.Tensor
    boxes: dict


def sample_patch_sets(x_ref, x_swap, generator, out_size, n_refs=8, n_queries=1):
    """References and real queries come from ``x_ref``; fake queries from ``x_swap``."""
    refs, b_ref = crop_patches(x_ref, n_refs, generator, out_size)
    real, b_real = crop_patches(x_ref, n_queries, generator, out_size)
    fake, b_fake = crop_patches(x_swap, n_queries, generator, out_size)
    return PatchSample(refs, real, fake, {"refs": b_ref, "real": b_real, "fake": b_fake})


def structure_swap_terms(patch_d, patches: PatchSample):
    """-> (generator term, discriminator term) for the co-occurrence patch critic."""
    fake = patch_d(patches.refs, patches.fake)
    real = patch_d(patches.refs, patches.real)
    g_term = F.softplus(-fake).mean()
    d_term = F.softplus(-real).mean() + F.softplus(fake).mean()
    return g_term, d_term


# -- generator-side losses ---------------------------------------------------------

def texture_swap_loss(x_a, x_b, extractor):
    """Perceptual distance between two renders that share a structure code."""
    return perceptual_distance(x_a, x_b, extractor)


def warp_loss(x1, c1, x2, c2, tau, extractor):
    """Warp ``x1`` into the frame of ``x2`` via coordinate affinity; compare perceptually."""
    return perceptual_distance(warp_image(x1, c1, c2, tau), x2, extractor)


def texture_swap_from_codes(generator, extractor, z_s, z_t1, z_t2):
    """:func:`texture_swap_loss` on ``G(z_s, z_t1)`` vs ``G(z_s, z_t2)``."""
    w_s = generator.structure_mapper(z_s)
    c = generator.warp(w_s)
    x1 = generator.render(c, generator.texture_mapper(z_t1))
    x2 = generator.render(c, generator.texture_mapper(z_t2))
    return texture_swap_loss(x1, x2, extractor)


def warp_loss_from_codes(generator, extractor, z_s1, z_t1, z_s2, z_t2, tau):
    """:func:`warp_loss` on ``x_k = G(z_sk, z_tk)`` with their correspondence maps."""
    x1, c1, _ = generator(z_s1, z_t1)
    x2, c2, _ = generator(z_s2, z_t2)
    return warp_loss(x1, c1, x2, c2, tau, extractor)


def chamfer_loss(c_warped):
    return chamfer_to_canonical(c_warped).mean()


def backward_loss(c_pred, canonical):
    return (c_pred - canonical.expand_as(c_pred)).abs().mean()


TERMS = ("t", "s", "warp", "cham", "gan", "bwd")
_WEIGHT_OF = {"t": "lambda_t", "s": "lambda_s", "warp": "lambda_warp", "cham": "lambda_cham",
              "gan": "lambda_gan", "bwd": "lambda_bwd"}


@dataclass
class GenBatch:
    """Renders for one generator step.

    ``x[i] = G(z_s[i], z_t[i])`` and ``y[i] = G(z_s[i], z_t[perm[i]])``, so
    ``(x[i], y[i])`` share structure and ``(x[perm[i]], y[i])`` share texture.
    """
    x: torch.Tensor
    y: torch.Tensor
    c: torch.Tensor
    w_s: torch.Tensor
    perm: torch.Tensor


def render_batch(generator, z_s, z_t, perm) -> GenBatch:
    w_s = generator.structure_mapper(z_s)
    c = generator.warp(w_s)
    w_t = generator.texture_mapper(z_t)
    both = generator.render(torch.cat([c, c]), torch.cat([w_t, w_t[perm]]))
    x, y = both.chunk(2)
    return GenBatch(x, y, c, w_s, perm)


def warp_pairs(batch: GenBatch, pairing: str):
    """(source image, source map, target image, target map) for the warp loss."""
    p = batch.perm
    if pairing == "shared_texture":
        # x[perm[i]] and y[i] share a texture code, different structure
        return batch.x[p], batch.c[p], batch.y, batch.c
    return batch.x, batch.c, batch.x[p], batch.c[p]


def generator_objective(models, extractor, batch: GenBatch, weights: LossWeights, cfg, patches=None):
    """Weighted sum of the generator losses.

    Returns ``(total, raw, weighted)`` where ``raw`` maps each term name to its
    unweighted value and ``weighted`` to its contribution; disabled terms are 0.
    """
    g = models.generator
    zero = batch.x.new_zeros(())
    raw = dict.fromkeys(TERMS, zero)
    if cfg.use_texture_swap:
        raw["t"] = texture_swap_loss(batch.x, batch.y, extractor)
    if cfg.use_structure_swap:
        if patches is None:
            raise ValueError("structure swap enabled but no patch sample given")
        raw["s"], _ = structure_swap_terms(models.patch_discriminator, patches)
    if cfg.use_warp_loss:
        x1, c1, x2, c2 = warp_pairs(batch, cfg.warp_pairing)
        raw["warp"] = warp_loss(x1, c1, x2, c2, cfg.tau, extractor)
    raw["cham"] = chamfer_loss(batch.c)
    raw["gan"], _ = gan_losses(zero, models.discriminator(batch.x))
    if g.backward_mlp is not None:
        raw["bwd"] = backward_loss(g.unwarp(batch.c, batch.w_s), g.canonical)
    weighted = {k: getattr(weights, _WEIGHT_OF[k]) * v for k, v in raw.items()}
    total = sum(weighted.values(), zero)
    return total, raw, weighted


ENC_TERMS = ("con", "rec", "t")


def latent_consistency(encoder, generator, w_s, c_warped, x_syn):
    w_s_e, _ = encoder(x_syn)
    c_e = generator.warp(w_s_e)
    return F.mse_loss(w_s_e, w_s) + F.mse_loss(c_e, c_warped)


def encoder_objective(models, extractor, real, z_s, z_t, z_t_swap, weights: LossWeights):
    """Encoder loss with the generator held fixed.

    ``z_s, z_t`` synthesise the consistency batch; ``z_t_swap`` supplies the
    texture codes for the swap term on encoded real images.
    """
    g, enc = models.generator, models.encoder
    with torch.no_grad():
        w_s = g.structure_mapper(z_s)
        c_w = g.warp(w_s)
        x_syn = g.render(c_w, g.texture_mapper(z_t))
        w_t_swap = g.texture_mapper(z_t_swap)
    raw = {"con": latent_consistency(enc, g, w_s, c_w, x_syn)}
    w_s_e, w_plus = enc(real)
    c_e = g.warp(w_s_e)
    recon = g.render(c_e, w_plus)
    raw["rec"] = (recon - real).abs().mean() + perceptual_distance(recon, real, extractor)
    raw["t"] = texture_swap_loss(recon, g.render(c_e, w_t_swap), extractor)
    lam = {"con": weights.lambda_con, "rec": weights.lambda_rec, "t": weights.lambda_t}
    weighted = {k: lam[k] * v for k, v in raw.items()}
    total = sum(weighted.values(), real.new_zeros(()))
    return total, raw, weighted
