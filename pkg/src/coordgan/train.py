"""Generator and encoder optimisation loops, warmup, lazy R1, checkpoints."""
from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import logging
import math
import shutil
import time
from pathlib import Path

import numpy as np
import torch

from . import formats
from .config import LossWeights, TrainConfig, from_dict
from .data import batch_indices, build_dataset
from .losses import (
    PatchSample,
    PerceptualExtractor,
    encoder_objective,
    gan_losses,
    generator_objective,
    latent_consistency,
    lazy_r1_weight,
    r1_penalty,
    render_batch,
    sample_patch_sets,
    structure_swap_terms,
)
from .nets import Models, build_models

log = logging.getLogger(__name__)

# keys a resumed run may change without altering the continuation of completed steps
RESUME_MUTABLE = frozenset({"iterations", "checkpoint_every", "log_every", "eval", "encoder_iterations"})

GEN_STREAM, ENC_STREAM, PROBE_STREAM = 1, 2, 3
# bumped whenever training code changes what a given config produces; part of the run-cache key
TRAINING_REVISION = 2


class TrainingDiverged(RuntimeError):
    pass


def warmup_weights(iteration: int, cfg: TrainConfig) -> LossWeights:
    """Ramp the warp, texture-swap and structure-swap weights linearly from 0."""
    f = 1.0 if cfg.warmup == 0 else min(1.0, iteration / cfg.warmup)
    return cfg.weights.scaled(lambda_warp=f, lambda_t=f, lambda_s=f)


def step_generator(seed: int, step: int, stream: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, step, stream]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


def set_requires_grad(module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def params_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _optim_tensors(prefix: str, opt: torch.optim.Optimizer) -> dict:
    out = {}
    for idx, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            out[f"optim.{prefix}.{idx}.{key}"] = val if torch.is_tensor(val) else torch.tensor(float(val))
    return out


def _load_optim(prefix: str, opt: torch.optim.Optimizer, tensors: dict) -> None:
    sd = opt.state_dict()
    state: dict = {}
    head = f"optim.{prefix}."
    for name, t in tensors.items():
        if name.startswith(head):
            idx, key = name[len(head):].split(".", 1)
            state.setdefault(int(idx), {})[key] = t.clone()
    sd["state"] = state
    opt.load_state_dict(sd)


def flush_denormals(fn):
    """Run ``fn`` with subnormal floats treated as zero, restoring IEEE behaviour after.

    Low-temperature softmax rows underflow into subnormals, which are many times
    slower on CPU; values that small are far below every loss tolerance.
    """
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        torch.set_flush_denormal(True)
        try:
            return fn(*args, **kwargs)
        finally:
            torch.set_flush_denormal(False)
    return wrapper


class LossLog:
    """Newline-delimited JSON records ``{"step", "term", "value"}``."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []

    def write(self, step: int, terms: dict) -> None:
        recs = [{"step": step, "term": k, "value": float(v)} for k, v in terms.items()]
        self.records.extend(recs)
        if self.path:
            with open(self.path, "a") as fh:
                fh.writelines(json.dumps(r) + "\n" for r in recs)

    def series(self, term: str) -> list[tuple[int, float]]:
        return [(r["step"], r["value"]) for r in self.records if r["term"] == term]


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


class Trainer:
    """Alternating discriminator / generator updates for the structure-texture GAN."""

    def __init__(self, cfg: TrainConfig, out_dir=None, dataset=None):
        self.cfg = cfg.validate()
        self.out_dir = Path(out_dir) if out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.models: Models = build_models(cfg.model, cfg.seed, cfg.mapping_lr_mul)
        self.extractor = PerceptualExtractor()
        self.dataset = dataset if dataset is not None else build_dataset(cfg.data, cfg.model.resolution)
        adam = dict(lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
        self.opt_g = torch.optim.Adam(self.models.generator.parameters(), **adam)
        self.opt_d = torch.optim.Adam(self.models.discriminator.parameters(), **adam)
        self.opt_p = torch.optim.Adam(self.models.patch_discriminator.parameters(), **adam)
        self.iteration = 0
        self.elapsed = 0.0
        self.log = LossLog(self.out_dir / "train_log.ndjson" if self.out_dir else None)

    def real_batch(self, step: int) -> torch.Tensor:
        idx = batch_indices(len(self.dataset), self.cfg.batch_size, self.cfg.seed, step)
        imgs = self.dataset.images[torch.from_numpy(idx)]
        if self.cfg.data.flip:
            g = step_generator(self.cfg.seed, step, 4)
            flip = torch.rand(len(idx), generator=g) < 0.5
            imgs = torch.where(flip[:, None, None, None], imgs.flip(-1), imgs)
        return imgs

    def sample_codes(self, g: torch.Generator):
        b, n = self.cfg.batch_size, self.cfg.model.latent_dim
        z_s = torch.randn(b, n, generator=g)
        z_t = torch.randn(b, n, generator=g)
        shift = int(torch.randint(1, b, (1,), generator=g)) if b > 1 else 0
        perm = (torch.arange(b) + shift) % b
        return z_s, z_t, perm

    @flush_denormals
    def step(self) -> dict:
        cfg, m = self.cfg, self.models
        it = self.iteration
        g = step_generator(cfg.seed, it, GEN_STREAM)
        real = self.real_batch(it)
        z_s, z_t, perm = self.sample_codes(g)
        weights = warmup_weights(it, cfg)

        batch = render_batch(m.generator, z_s, z_t, perm)
        patches = None
        if cfg.use_structure_swap:
            patches = sample_patch_sets(batch.x[perm], batch.y, g, m.patch_size,
                                        cfg.patch_refs, cfg.patch_queries)

        # discriminators
        set_requires_grad(m.discriminator, True)
        set_requires_grad(m.patch_discriminator, True)
        _, d_loss = gan_losses(m.discriminator(real), m.discriminator(batch.x.detach()))
        d_total = d_loss
        r1w = lazy_r1_weight(it, cfg.r1_interval, cfg.r1_gamma)
        stats = {"d_loss": d_loss.item()}
        if r1w:
            r1 = r1_penalty(m.discriminator, real)
            d_total = d_total + r1w * r1
            stats["d_r1"] = r1.item()
        self.opt_d.zero_grad(set_to_none=True)
        d_total.backward()
        self.opt_d.step()

        if patches is not None:
            det = PatchSample(patches.refs.detach(), patches.real.detach(), patches.fake.detach(), patches.boxes)
            _, p_loss = structure_swap_terms(m.patch_discriminator, det)
            p_total = p_loss
            stats["patch_d_loss"] = p_loss.item()
            r1w = lazy_r1_weight(it, cfg.r1_interval, cfg.r1_gamma_patch)
            if r1w:
                r1 = r1_penalty(lambda refs, q: m.patch_discriminator(refs, q), det.refs, det.real)
                p_total = p_total + r1w * r1
                stats["patch_d_r1"] = r1.item()
            self.opt_p.zero_grad(set_to_none=True)
            p_total.backward()
            self.opt_p.step()

        # generator, against the freshly updated critics
        set_requires_grad(m.discriminator, False)
        set_requires_grad(m.patch_discriminator, False)
        total, raw, weighted = generator_objective(m, self.extractor, batch, weights, cfg, patches)
        terms = {f"raw.{k}": v.item() for k, v in raw.items()}
        terms.update({f"weighted.{k}": v.item() for k, v in weighted.items()})
        terms["g_total"] = total.item()
        terms.update(stats)
        if not all(math.isfinite(v) for v in terms.values()):
            self._dump_divergence(it, terms)
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()

        if it % cfg.log_every == 0:
            self.log.write(it, terms)
        self.iteration += 1
        return terms

    def _dump_divergence(self, it, terms):
        msg = json.dumps({"step": it, "terms": terms}, indent=2)
        if self.out_dir:
            (self.out_dir / f"diverged_step{it}.json").write_text(msg)
        raise TrainingDiverged(f"non-finite loss at step {it}:\n{msg}")

    def run(self, until: int | None = None, checkpoint_every: int | None = None):
        until = self.cfg.iterations if until is None else until
        every = checkpoint_every if checkpoint_every is not None else self.cfg.checkpoint_every
        t0 = time.perf_counter()
        while self.iteration < until:
            terms = self.step()
            if self.iteration % 100 == 0:
                log.info("it %d  d %.3f  g %.3f  cham %.4f", self.iteration, terms["d_loss"],
                         terms["g_total"], terms["raw.cham"])
            if self.out_dir and every and self.iteration % every == 0:
                self.elapsed += time.perf_counter() - t0
                t0 = time.perf_counter()
                self.save(self.out_dir / f"ckpt_{self.iteration:06d}")
        self.elapsed += time.perf_counter() - t0
        return self

    # -- persistence ----------------------------------------------------------------

    def state_tensors(self) -> dict:
        t = {f"params.{k}": v for k, v in self.models.state_dict().items()}
        t.update(_optim_tensors("g", self.opt_g))
        t.update(_optim_tensors("d", self.opt_d))
        t.update(_optim_tensors("p", self.opt_p))
        return t

    def save(self, path) -> Path:
        meta = {"stage": "generator", "iteration": self.iteration, "config": self.cfg.to_dict(),
                "config_digest": self.cfg.digest(), "elapsed_seconds": self.elapsed,
                "generator_hash": params_hash(self.models.generator)}
        formats.save_tensors(path, self.state_tensors(), meta)
        return Path(path)

    @classmethod
    def resume(cls, path, out_dir=None, dataset=None, cfg: TrainConfig | None = None) -> "Trainer":
        """Continue from a checkpoint; ``cfg`` may differ from the stored config only in schedule keys."""
        tensors, manifest = formats.load_tensors(path)
        stored = from_dict(manifest["config"])
        if cfg is not None:
            a, b = stored.to_dict(), cfg.to_dict()
            changed = sorted(k for k in a if a[k] != b[k] and k not in RESUME_MUTABLE)
            if changed:
                raise ValueError(f"resume cannot change {', '.join(changed)}")
        tr = cls(cfg or stored, out_dir, dataset)
        load_params(tr.models, tensors)
        _load_optim("g", tr.opt_g, tensors)
        _load_optim("d", tr.opt_d, tensors)
        _load_optim("p", tr.opt_p, tensors)
        tr.iteration = manifest["iteration"]
        tr.elapsed = manifest.get("elapsed_seconds", 0.0)
        return tr


def load_params(models: Models, tensors: dict) -> None:
    sd = {k[len("params."):]: v for k, v in tensors.items() if k.startswith("params.")}
    models.load_state_dict(sd)


def load_models(path) -> tuple[Models, TrainConfig, dict]:
    """Rebuild every parameter group stored in a checkpoint directory."""
    tensors, manifest = formats.load_tensors(path)
    cfg = from_dict(manifest["config"])
    models = build_models(cfg.model, cfg.seed, cfg.mapping_lr_mul)
    load_params(models, tensors)
    models.eval()
    return models, cfg, manifest


def train_generator(cfg: TrainConfig, out_dir, resume=None) -> Path:
    tr = Trainer.resume(resume, out_dir) if resume else Trainer(cfg, out_dir)
    tr.run()
    final = tr.save(Path(out_dir) / "final")
    return final


# -- encoder ----------------------------------------------------------------------------

class EncoderTrainer:
    """Optimises only the encoder; the generator is loaded from a checkpoint and frozen."""

    def __init__(self, cfg: TrainConfig, generator_checkpoint, out_dir=None, dataset=None):
        self.models, gen_cfg, manifest = load_models(generator_checkpoint)
        if dataclasses.asdict(gen_cfg.model) != dataclasses.asdict(cfg.model):
            raise ValueError("encoder config's model section differs from the generator checkpoint's")
        self.cfg = cfg.validate()
        self.generator_checkpoint = str(generator_checkpoint)
        self.out_dir = Path(out_dir) if out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.extractor = PerceptualExtractor()
        self.dataset = dataset if dataset is not None else build_dataset(cfg.data, cfg.model.resolution)
        set_requires_grad(self.models.generator, False)
        set_requires_grad(self.models.discriminator, False)
        set_requires_grad(self.models.patch_discriminator, False)
        self.opt_e = torch.optim.Adam(self.models.encoder.parameters(), lr=cfg.lr,
                                      betas=(cfg.beta1, cfg.beta2))
        self.iteration = 0
        self.log = LossLog(self.out_dir / "encoder_log.ndjson" if self.out_dir else None)
        g = step_generator(cfg.seed, 0, PROBE_STREAM)
        n = cfg.model.latent_dim
        self.probe = (torch.randn(32, n, generator=g), torch.randn(32, n, generator=g))

    def probe_consistency(self) -> float:
        g = self.models.generator
        with torch.no_grad():
            w_s = g.structure_mapper(self.probe[0])
            c = g.warp(w_s)
            x = g.render(c, g.texture_mapper(self.probe[1]))
            return latent_consistency(self.models.encoder, g, w_s, c, x).item()

    @flush_denormals
    def step(self) -> dict:
        cfg = self.cfg
        it = self.iteration
        gen = step_generator(cfg.seed, it, ENC_STREAM)
        b, n = cfg.encoder_batch_size, cfg.model.latent_dim
        idx = batch_indices(len(self.dataset), b, cfg.seed + 7919, it)
        real = self.dataset.images[torch.from_numpy(idx)]
        z_s, z_t, z_sw = (torch.randn(b, n, generator=gen) for _ in range(3))
        total, raw, weighted = encoder_objective(self.models, self.extractor, real, z_s, z_t, z_sw, cfg.weights)
        terms = {f"raw.{k}": v.item() for k, v in raw.items()}
        terms.update({f"weighted.{k}": v.item() for k, v in weighted.items()})
        terms["e_total"] = total.item()
        if not all(math.isfinite(v) for v in terms.values()):
            raise TrainingDiverged(f"non-finite encoder loss at step {it}: {terms}")
        self.opt_e.zero_grad(set_to_none=True)
        total.backward()
        self.opt_e.step()
        self.iteration += 1
        return terms

    def run(self, until=None, probe_every=100):
        until = self.cfg.encoder_iterations if until is None else until
        t0 = time.perf_counter()
        if self.iteration == 0:
            self.log.write(0, {"probe_con": self.probe_consistency()})
        while self.iteration < until:
            terms = self.step()
            if self.iteration % probe_every == 0 or self.iteration == until:
                terms["probe_con"] = self.probe_consistency()
            self.log.write(self.iteration, terms)
        self.elapsed = time.perf_counter() - t0
        return self

    def save(self, path) -> Path:
        meta = {"stage": "encoder", "iteration": self.iteration, "config": self.cfg.to_dict(),
                "config_digest": self.cfg.digest(), "generator_checkpoint": self.generator_checkpoint,
                "generator_hash": params_hash(self.models.generator),
                "elapsed_seconds": getattr(self, "elapsed", 0.0)}
        t = {f"params.{k}": v for k, v in self.models.state_dict().items()}
        t.update(_optim_tensors("e", self.opt_e))
        formats.save_tensors(path, t, meta)
        return Path(path)


def train_encoder(cfg: TrainConfig, generator_checkpoint, out_dir) -> Path:
    tr = EncoderTrainer(cfg, generator_checkpoint, out_dir)
    tr.run()
    return tr.save(Path(out_dir) / "final")


# -- cached runs ---------------------------------------------------------------------------

def cached_generator(cfg: TrainConfig, cache) -> Path:
    """Final generator checkpoint for ``cfg``, trained on first use and keyed by its training digest.

    An incomplete run directory (no final checkpoint) is discarded and retrained from scratch,
    so the recorded wall time always covers one uninterrupted run.
    """
    root = Path(cache) / "runs" / f"gen-r{TRAINING_REVISION}-{cfg.training_digest()}"
    final = root / "final"
    if (final / "manifest.json").exists():
        return final
    shutil.rmtree(root, ignore_errors=True)
    log.info("training generator into %s", root)
    return train_generator(cfg, root)


def cached_encoder(cfg: TrainConfig, generator_checkpoint, cache) -> Path:
    gen_hash = formats.read_manifest(generator_checkpoint)["generator_hash"]
    root = Path(cache) / "runs" / f"enc-r{TRAINING_REVISION}-{cfg.training_digest()}-{gen_hash[:12]}"
    final = root / "final"
    if (final / "manifest.json").exists():
        return final
    shutil.rmtree(root, ignore_errors=True)
    log.info("training encoder into %s", root)
    return train_encoder(cfg, generator_checkpoint, root)
