"""Conditional DDPM over VQ-VAE latents.

Covers the noise schedule, forward q-sampling, the denoising loss with
per-modality condition dropout, multi-condition classifier-free guidance,
ancestral sampling, and blended completion that re-imposes observed latent
sites after every reverse step.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import conditioning as cond
from . import nn
from .autodiff import ParamStore, Tensor
from .conditioning import ConditionSet, Conditioners, EMBED_DIM, TOTAL_TOKENS
from .dataset import Dataset
from .geometry import TsdfGrid
from .vqvae import TrainingDiverged, VqVaeModel

DROPOUT_EACH = 0.1   # independent per-modality condition dropout
DROPOUT_ALL = 0.05   # additional chance of dropping every modality at once


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

@dataclass
class DiffusionSchedule:
    """beta/alpha tables, 1-indexed through the accessors (alpha_bar(0) == 1)."""

    betas: np.ndarray  # (T,), betas[i] is beta_{i+1}

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or len(self.betas) < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        if np.any(np.diff(self.betas) < 0):
            raise ValueError("betas must be nondecreasing")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    @property
    def T(self) -> int:
        return len(self.betas)

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])

    def posterior_variance(self, t: int) -> float:
        return self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))


def make_schedule(T: int, beta_start: float, beta_end: float) -> DiffusionSchedule:
    """Linear beta schedule; cumulative products give the alpha-bar table."""
    if T < 2:
        raise ValueError("schedule needs at least 2 steps")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return DiffusionSchedule(np.linspace(beta_start, beta_end, T))


def default_schedule(T: int = 100) -> DiffusionSchedule:
    """Rescaled-linear schedule keeping alpha_bar_T comparable to the 1000-step
    convention; terminal alpha_bar stays below 0.05. Betas clamp into (0, 1)
    so very short debug schedules remain constructible."""
    scale = 1000.0 / T
    beta_end = min(0.02 * scale, 0.99)
    return make_schedule(T, min(1e-4 * scale, beta_end), beta_end)


def q_sample(z0: np.ndarray, t: int, eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """Forward noising: z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {eps.shape} != latent shape {z0.shape}")
    if not (1 <= t <= sched.T):
        raise ValueError(f"timestep {t} outside [1, {sched.T}]")
    ab = sched.alpha_bar(t)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# Denoiser: small 3D UNet with time embedding and cross-attention
# ---------------------------------------------------------------------------

@dataclass
class DiffusionConfig:
    latent_extent: int = 4
    channels: int = 8
    hidden: int = 48
    temb_dim: int = 64
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    n_classes: int = 4
    vocab_size: int = 24
    grid_resolution: int = 16
    epochs: int = 60
    batch: int = 16
    lr: float = 2e-3
    seed: int = 0
    modalities: tuple = cond.MODALITY_ORDER

    def schedule(self) -> "DiffusionSchedule":
        return make_schedule(self.T, self.beta_start, self.beta_end)


class _ResBlock3d:
    def __init__(self, store, name, ch, temb_dim, rng):
        self.n1 = nn.GroupNorm(store, f"{name}.n1", ch, groups=4)
        self.c1 = nn.Conv3d(store, f"{name}.c1", ch, ch, 3, rng, pad=1)
        self.temb = nn.Linear(store, f"{name}.temb", temb_dim, ch, rng)
        self.n2 = nn.GroupNorm(store, f"{name}.n2", ch, groups=4)
        self.c2 = nn.Conv3d(store, f"{name}.c2", ch, ch, 3, rng, pad=1)

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.c1(ad.silu(self.n1(x)))
        tproj = self.temb(ad.silu(temb))                      # (n, ch)
        h = ad.add(h, ad.reshape(tproj, tproj.shape + (1, 1, 1)))
        h = self.c2(ad.silu(self.n2(h)))
        return ad.add(x, h)


class _CrossAttention3d:
    def __init__(self, store, name, ch, rng):
        self.norm = nn.GroupNorm(store, f"{name}.norm", ch, groups=4)
        self.q = nn.Linear(store, f"{name}.q", ch, ch, rng)
        self.k = nn.Linear(store, f"{name}.k", EMBED_DIM, ch, rng)
        self.v = nn.Linear(store, f"{name}.v", EMBED_DIM, ch, rng)
        self.out = nn.Linear(store, f"{name}.out", ch, ch, rng)

    def __call__(self, x: Tensor, tokens: Tensor) -> Tensor:
        n, ch = x.shape[0], x.shape[1]
        sites = int(np.prod(x.shape[2:]))
        h = self.norm(x)
        h = ad.transpose(ad.reshape(h, (n, ch, sites)), (0, 2, 1))  # (n, sites, ch)
        att = ad.scaled_dot_attention(self.q(h), self.k(tokens), self.v(tokens))
        att = ad.transpose(self.out(att), (0, 2, 1))
        return ad.add(x, ad.reshape(att, x.shape))


class DenoiserModel:
    """Two-level UNet over the latent grid, conditioned through cross-attention."""

    def __init__(self, config: DiffusionConfig, store: ParamStore | None = None):
        self.config = config
        fresh = store is None
        self.store = store if store is not None else ParamStore()
        rng = np.random.default_rng(config.seed)

        def build(s: ParamStore):
            h, td = config.hidden, config.temb_dim
            m = {}
            m["cond"] = Conditioners(s, rng, config.n_classes, config.vocab_size,
                                     config.grid_resolution)
            m["t1"] = nn.Linear(s, "unet.t1", 32, td, rng)
            m["t2"] = nn.Linear(s, "unet.t2", td, td, rng)
            m["in"] = nn.Conv3d(s, "unet.in", config.channels, h, 3, rng, pad=1)
            m["rb1"] = _ResBlock3d(s, "unet.rb1", h, td, rng)
            m["at1"] = _CrossAttention3d(s, "unet.at1", h, rng)
            m["down"] = nn.Conv3d(s, "unet.down", h, h, 2, rng, stride=2)
            m["rb2"] = _ResBlock3d(s, "unet.rb2", h, td, rng)
            m["at2"] = _CrossAttention3d(s, "unet.at2", h, rng)
            m["up"] = nn.ConvTranspose3d(s, "unet.up", h, h, 2, rng, stride=2)
            m["merge"] = nn.Conv3d(s, "unet.merge", 2 * h, h, 3, rng, pad=1)
            m["rb3"] = _ResBlock3d(s, "unet.rb3", h, td, rng)
            m["at3"] = _CrossAttention3d(s, "unet.at3", h, rng)
            m["outn"] = nn.GroupNorm(s, "unet.outn", h, groups=4)
            m["out"] = nn.Conv3d(s, "unet.out", h, config.channels, 3, rng, pad=1)
            return m

        if fresh:
            self.m = build(self.store)
        else:
            tmp = ParamStore()
            self.m = build(tmp)
            self._adopt(tmp)

    def _adopt(self, tmp: ParamStore) -> None:
        if set(tmp.params) != set(self.store.params):
            missing = set(tmp.params) ^ set(self.store.params)
            raise ValueError(f"checkpoint does not match architecture: {sorted(missing)[:4]}")
        remap = {t.id: self.store[name] for name, t in tmp.params.items()}

        def swap(obj):
            for attr in ("w", "b", "gamma", "beta", "table"):
                if hasattr(obj, attr):
                    setattr(obj, attr, remap[getattr(obj, attr).id])

        for part in self.m.values():
            if isinstance(part, (nn.Conv3d, nn.ConvTranspose3d, nn.Linear, nn.GroupNorm)):
                swap(part)
            elif isinstance(part, (_ResBlock3d, _CrossAttention3d)):
                for sub in vars(part).values():
                    swap(sub)
            elif isinstance(part, Conditioners):
                for sub in vars(part).values():
                    if hasattr(sub, "__dict__"):
                        swap(sub)

    @property
    def conditioners(self) -> Conditioners:
        return self.m["cond"]

    @property
    def latent_shape(self) -> tuple[int, ...]:
        d = self.config.latent_extent
        return (self.config.channels, d, d, d)

    def predict(self, z: Tensor, t: np.ndarray, tokens: Tensor) -> Tensor:
        """Noise prediction for a batch: z (n, c, d, d, d), t (n,), tokens (n, 21, 32)."""
        m = self.m
        temb = m["t2"](ad.silu(m["t1"](ad.constant(nn.sinusoidal_time_embedding(t, 32)))))
        h1 = m["in"](z)
        h1 = m["rb1"](h1, temb)
        h1 = m["at1"](h1, tokens)
        h2 = m["down"](h1)
        h2 = m["rb2"](h2, temb)
        h2 = m["at2"](h2, tokens)
        h3 = m["up"](h2)
        h3 = m["merge"](ad.concat([h3, h1], axis=1))
        h3 = m["rb3"](h3, temb)
        h3 = m["at3"](h3, tokens)
        return m["out"](ad.silu(m["outn"](h3)))

    def predict_np(self, z: np.ndarray, t: int, tokens: np.ndarray) -> np.ndarray:
        """Single-latent inference path used by the samplers."""
        out = self.predict(ad.constant(z[None]), np.array([t]),
                           ad.constant(tokens[None]))
        return out.data[0]

    def save(self, path_prefix: str) -> None:
        self.store.save(path_prefix + ".ckpt")
        with open(path_prefix + ".json", "w") as f:
            json.dump(asdict(self.config), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path_prefix: str) -> "DenoiserModel":
        with open(path_prefix + ".json") as f:
            raw = json.load(f)
        raw["modalities"] = tuple(raw.get("modalities", cond.MODALITY_ORDER))
        cfg = DiffusionConfig(**raw)
        return cls(cfg, store=ParamStore.load(path_prefix + ".ckpt"))


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def training_loss(model: DenoiserModel, z0: np.ndarray, conditions: ConditionSet,
                  sched: DiffusionSchedule, rng: np.random.Generator,
                  p_each: float = DROPOUT_EACH, p_all: float = DROPOUT_ALL) -> Tensor:
    """Simplified denoising objective for one latent with condition dropout."""
    t = int(rng.integers(1, sched.T + 1))
    eps = rng.standard_normal(z0.shape)
    z_t = q_sample(z0, t, eps, sched)
    kept = [cond.drop_condition(e.tokens, p_each, rng) for e in conditions.entries]
    if rng.random() < p_all:
        kept = [cond.zero_tokens(s.modality) for s in kept]
    tokens = cond.aggregate(kept)
    pred = model.predict(ad.constant(z_t[None]), np.array([t]),
                         ad.reshape(tokens, (1,) + tokens.shape))
    return ad.mse(pred, ad.constant(eps[None]))


def cfg_combine(eps_null: np.ndarray, per_modality: Sequence[np.ndarray],
                weights: Sequence[float]) -> np.ndarray:
    """eps_null + sum_i s_i (eps_i - eps_null): multi-modality guidance."""
    if len(per_modality) != len(weights):
        raise ValueError(
            f"{len(per_modality)} predictions vs {len(weights)} weights"
        )
    out = eps_null.copy()
    for eps_i, s in zip(per_modality, weights):
        if eps_i.shape != eps_null.shape:
            raise ValueError(f"prediction shape {eps_i.shape} != {eps_null.shape}")
        out += s * (eps_i - eps_null)
    return out


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _guidance_tokens(conditions: ConditionSet) -> tuple[np.ndarray, list[np.ndarray], list[float]]:
    """Null tokens plus one single-modality-active token matrix per weighted entry.

    Encoders are deterministic, so the matrices are computed once per run and
    reused across timesteps.
    """
    null = np.zeros((TOTAL_TOKENS, EMBED_DIM))
    singles, weights = [], []
    for e in conditions.entries:
        if e.weight == 0.0:
            continue
        singles.append(cond.aggregate([e.tokens]).data)
        weights.append(e.weight)
    return null, singles, weights


def sample(model, sched: DiffusionSchedule, conditions: ConditionSet,
           seed: int, z_T: Optional[np.ndarray] = None,
           progress: Optional[Callable[[float], None]] = None) -> np.ndarray:
    """DDPM ancestral sampling with classifier-free guidance; deterministic per seed."""
    rng = np.random.default_rng(seed)
    shape = model.latent_shape
    z = rng.standard_normal(shape) if z_T is None else np.array(z_T, dtype=np.float64)
    null, singles, weights = _guidance_tokens(conditions)
    for t in range(sched.T, 0, -1):
        eps_null = model.predict_np(z, t, null)
        if singles:
            per_mod = [model.predict_np(z, t, s) for s in singles]
            eps = cfg_combine(eps_null, per_mod, weights)
        else:
            eps = eps_null
        ab = sched.alpha_bar(t)
        mean = (z - sched.beta(t) / np.sqrt(1.0 - ab) * eps) / np.sqrt(sched.alpha(t))
        if t > 1:
            z = mean + np.sqrt(sched.posterior_variance(t)) * rng.standard_normal(shape)
        else:
            z = mean
        if progress:
            progress((sched.T - t + 1) / sched.T)
    return z


def downsample_mask(mask: np.ndarray, latent_extent: int) -> np.ndarray:
    """A latent site is observed iff every voxel it covers is observed."""
    d = latent_extent
    res = mask.shape[0]
    if res % d:
        raise ValueError(f"mask resolution {res} not divisible by latent extent {d}")
    f = res // d
    blocks = mask.astype(bool).reshape(d, f, d, f, d, f)
    return blocks.all(axis=(1, 3, 5))


def blended_completion(model, sched: DiffusionSchedule, vqvae: VqVaeModel,
                       partial: TsdfGrid, mask: np.ndarray,
                       conditions: ConditionSet, seed: int,
                       step_observer: Optional[Callable[[int, np.ndarray], None]] = None,
                       progress: Optional[Callable[[float], None]] = None) -> TsdfGrid:
    """Shape completion: sample, but re-impose the noised partial latent on
    observed sites after every reverse step; decode through the quantizer."""
    z_part = vqvae.encode(partial)
    site_mask = downsample_mask(mask, vqvae.config.latent_extent)
    if not site_mask.any():
        warnings.warn("observation mask covers no whole latent site; "
                      "falling back to unconditional sampling")
        z = sample(model, sched, conditions, seed, progress=progress)
        return vqvae.decode(vqvae.quantize(z)[0])

    rng = np.random.default_rng(seed)
    rng_blend = np.random.default_rng([seed, 0x51DE])
    shape = model.latent_shape
    z = rng.standard_normal(shape)
    null, singles, weights = _guidance_tokens(conditions)
    obs = site_mask[None].repeat(shape[0], axis=0)
    for t in range(sched.T, 0, -1):
        eps_null = model.predict_np(z, t, null)
        if singles:
            eps = cfg_combine(eps_null, [model.predict_np(z, t, s) for s in singles], weights)
        else:
            eps = eps_null
        ab = sched.alpha_bar(t)
        mean = (z - sched.beta(t) / np.sqrt(1.0 - ab) * eps) / np.sqrt(sched.alpha(t))
        if t > 1:
            z = mean + np.sqrt(sched.posterior_variance(t)) * rng.standard_normal(shape)
            blend = q_sample(z_part, t - 1, rng_blend.standard_normal(shape), sched)
        else:
            z = mean
            blend = z_part
        z[obs] = blend[obs]
        if step_observer:
            step_observer(t - 1, z.copy())
        if progress:
            progress((sched.T - t + 1) / sched.T)
    return vqvae.decode(vqvae.quantize(z)[0])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _condition_arrays(ds: Dataset, samples) -> dict:
    cats = list(ds.categories)
    return {
        "class_ids": np.array([cats.index(s.category) for s in samples]),
        "text_ids": [ds.keyword_ids(s.keywords) for s in samples],
        "sils": np.stack([s.silhouette for s in samples]).astype(np.float64),
        "partials": np.stack([s.partial.values for s in samples]),
        "masks": np.stack([s.mask for s in samples]),
    }


def train_diffusion(ds: Dataset, vqvae: VqVaeModel,
                    config: DiffusionConfig | None = None,
                    sched: DiffusionSchedule | None = None,
                    log=None) -> tuple[DenoiserModel, DiffusionSchedule, list[float]]:
    """Joint training of the denoiser and all condition encoders (Adam).

    Dropout is applied per modality per sample, plus a joint all-modality
    drop, so the null-condition prediction is trained as well.
    """
    config = config or DiffusionConfig(
        n_classes=len(ds.categories), vocab_size=len(ds.vocab),
        grid_resolution=ds.resolution,
    )
    sched = sched or config.schedule()
    model = DenoiserModel(config)
    rng = np.random.default_rng(config.seed + 17)

    train = ds.train
    arrays = _condition_arrays(ds, train)
    lat_batches = []
    for start in range(0, len(train), 16):
        grids = np.stack([s.grid.values for s in train[start:start + 16]])
        lat_batches.append(vqvae.encode_t(ad.constant(grids[:, None])).data)
    latents = np.concatenate(lat_batches)  # (n, c, d, d, d)

    n = len(train)
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, config.batch):
            idx = order[start:start + config.batch]
            b = len(idx)
            t = rng.integers(1, sched.T + 1, size=b)
            eps = rng.standard_normal((b,) + model.latent_shape)
            ab = sched.alpha_bars[t - 1][:, None, None, None, None]
            z_t = np.sqrt(ab) * latents[idx] + np.sqrt(1.0 - ab) * eps
            keeps = {m: (rng.random(b) >= DROPOUT_EACH) for m in cond.MODALITY_ORDER}
            drop_all = rng.random(b) < DROPOUT_ALL
            for m in keeps:
                keeps[m] = (keeps[m] & ~drop_all).astype(np.float64)[:, None, None]
            try:
                with ad.Tape() as tape:
                    c = model.conditioners
                    tok_p = c.encode_partial_batch(arrays["partials"][idx], arrays["masks"][idx])
                    tok_c = c.encode_class_batch(arrays["class_ids"][idx])
                    tok_t = c.encode_text_batch([arrays["text_ids"][i] for i in idx])
                    tok_s = c.encode_silhouette_batch(arrays["sils"][idx])
                    tokens = ad.concat([
                        ad.mul(tok_p, ad.constant(keeps["partial"])),
                        ad.mul(tok_c, ad.constant(keeps["class"])),
                        ad.mul(tok_t, ad.constant(keeps["text"])),
                        ad.mul(tok_s, ad.constant(keeps["silhouette"])),
                    ], axis=1)
                    pred = model.predict(ad.constant(z_t), t, tokens)
                    loss = ad.mse(pred, ad.constant(eps))
                grads = ad.backward(tape, loss)
            except ad.NonFiniteError as e:
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}: {e}") from e
            ad.adam_step(model.store, grads, config.lr)
            total += loss.item()
            count += 1
        curve.append(total / count)
        if log:
            log(f"diffusion epoch {epoch}: loss {curve[-1]:.5f}")
    return model, sched, curve
