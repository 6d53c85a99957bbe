"""Texturing a fixed shape from keywords via score distillation against a toy 2D critic.

The shape's TSDF is converted once to a density grid (frozen); a learnable RGB
voxel field is rendered orthographically by alpha compositing, and the critic's
noise residual, weighted by w(t) = 1 - alpha_bar_t, drives Adam updates of the
color parameters only. The critic itself is a small conditional 2D DDPM
trained on renders of procedurally colored shapes; it stays frozen here.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ParamStore, Tensor
from .dataset import Dataset, KEYWORD_VOCAB
from .diffusion import DiffusionSchedule, default_schedule, q_sample
from .geometry import DensityGrid, TsdfGrid, tsdf_to_density
from .vqvae import TrainingDiverged

# Training colors per keyword; texturing success is measured against these.
PALETTE = {
    "red": (0.8, 0.1, 0.1),
    "green": (0.1, 0.7, 0.15),
    "blue": (0.12, 0.15, 0.8),
    "yellow": (0.85, 0.8, 0.1),
    "white": (0.95, 0.95, 0.95),
    "gray": (0.5, 0.5, 0.5),
}

VOLSDF_ALPHA = 50.0  # inverse shape units; opaque surfaces at 64-sample rays
VOLSDF_BETA = 0.02

MAX_CRITIC_TOKENS = 8
CRITIC_EMBED = 32


@dataclass
class RenderConfig:
    image_size: int = 64
    n_azimuths: int = 8
    elevations: tuple = (0.35, 0.9)   # radians
    samples_per_ray: int = 32
    half_width: float = 1.15          # orthographic footprint half-extent
    ray_span: float = 2.2             # marched distance through the domain
    background: tuple = (1.0, 1.0, 1.0)

    @property
    def step_size(self) -> float:
        return self.ray_span / self.samples_per_ray

    def poses(self) -> list[tuple[float, float]]:
        az = [2.0 * np.pi * i / self.n_azimuths for i in range(self.n_azimuths)]
        return [(a, e) for e in self.elevations for a in az]


class ColorField:
    """Learnable RGB voxel grid; queries pass through a sigmoid so every
    trilinearly interpolated color stays inside [0, 1]."""

    def __init__(self, resolution: int = 16, store: Optional[ParamStore] = None):
        self.resolution = resolution
        self.store = store or ParamStore()
        if "color.raw" not in self.store.params:
            self.store.add("color.raw", np.zeros((3, resolution, resolution, resolution)))
        self.raw = self.store["color.raw"]

    def activated(self) -> Tensor:
        half = ad.scale(ad.tanh(ad.scale(self.raw, 0.5)), 0.5)  # sigmoid via tanh
        return ad.add(half, ad.constant(np.full(1, 0.5)))

    def query_t(self, coords: np.ndarray) -> Tensor:
        """Differentiable colors (n, 3) at continuous voxel coordinates."""
        return ad.transpose(ad.trilinear_sample(self.activated(), coords), (0, 1))

    def query(self, points: np.ndarray) -> np.ndarray:
        """Colors at world positions in [-1, 1]^3 (inference path)."""
        coords = self._world_to_grid(points)
        return self.query_t(coords).data

    def _world_to_grid(self, points: np.ndarray) -> np.ndarray:
        d = self.resolution
        return (np.asarray(points) + 1.0) / (2.0 / d) - 0.5


def _grid_coords(points: np.ndarray, resolution: int) -> np.ndarray:
    return (points + 1.0) / (2.0 / resolution) - 0.5


def _sample_density(density: DensityGrid, points: np.ndarray) -> np.ndarray:
    """Trilinear density at world points (constant path, no gradients)."""
    d = density.resolution
    c = np.clip(_grid_coords(points, d), 0.0, d - 1.0)
    i0 = np.minimum(np.floor(c).astype(np.int64), d - 2 if d > 1 else 0)
    f = c - i0
    i1 = np.minimum(i0 + 1, d - 1)
    out = np.zeros(len(points))
    v = density.values
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ix = i1[:, 0] if dx else i0[:, 0]
                iy = i1[:, 1] if dy else i0[:, 1]
                iz = i1[:, 2] if dz else i0[:, 2]
                w = ((f[:, 0] if dx else 1 - f[:, 0])
                     * (f[:, 1] if dy else 1 - f[:, 1])
                     * (f[:, 2] if dz else 1 - f[:, 2]))
                out += w * v[ix, iy, iz]
    return out


def composite_ray(sigmas: np.ndarray, colors: np.ndarray, delta: float,
                  background: np.ndarray) -> np.ndarray:
    """Reference alpha compositing for one ray (oracle for the renderer)."""
    a = 1.0 - np.exp(-sigmas * delta)
    t = np.cumprod(np.concatenate([[1.0], 1.0 - a]))[:-1]
    return (t * a) @ colors + t[-1] * (1.0 - a[-1]) * background


@dataclass
class RayBundle:
    """Frozen per-pose quantities for one density grid.

    The compositing and trilinear corner weights fold into one sparse map
    (src voxel, dst pixel, weight); rendering is then a single sparse_mix of
    the activated color grid plus the background term.
    """

    src: np.ndarray       # (entries,) flat voxel ids
    dst: np.ndarray       # (entries,) pixel ids
    w: np.ndarray         # (entries,) combined weights
    weights: np.ndarray   # (pixels, samples) compositing weights (diagnostics)
    t_final: np.ndarray   # (pixels,) residual transmittance
    n_pixels: int
    grid_resolution: int


def _pose_rays(pose: tuple[float, float], cfg: RenderConfig) -> tuple[np.ndarray, np.ndarray]:
    az, el = pose
    d = -np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    up_world = np.array([0.0, 0.0, 1.0])
    right = np.cross(d, up_world)
    right /= np.linalg.norm(right)
    up = np.cross(right, d)
    n = cfg.image_size
    px = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    u, v = np.meshgrid(px * cfg.half_width, px[::-1] * cfg.half_width, indexing="xy")
    origins = (u.ravel()[:, None] * right[None, :]
               + v.ravel()[:, None] * up[None, :]
               - d[None, :] * (cfg.ray_span / 2.0))
    return origins, d


def build_ray_bundle(density: DensityGrid, pose: tuple[float, float],
                     cfg: RenderConfig) -> RayBundle:
    origins, d = _pose_rays(pose, cfg)
    s = cfg.samples_per_ray
    res = density.resolution
    ts = (np.arange(s) + 0.5) * cfg.step_size
    pts = origins[:, None, :] + ts[None, :, None] * d[None, None, :]
    flat = pts.reshape(-1, 3)
    sig = _sample_density(density, flat).reshape(-1, s)
    a = 1.0 - np.exp(-sig * cfg.step_size)
    trans = np.cumprod(np.concatenate([np.ones((len(a), 1)), 1.0 - a], axis=1), axis=1)
    weights = trans[:, :-1] * a
    n_pix = len(weights)

    c = np.clip(_grid_coords(flat, res), 0.0, res - 1.0)
    i0 = np.minimum(np.floor(c).astype(np.int64), max(res - 2, 0))
    f = c - i0
    i1 = np.minimum(i0 + 1, res - 1)
    pix = np.repeat(np.arange(n_pix, dtype=np.int64), s)
    w_comp = weights.ravel()
    srcs, dsts, ws = [], [], []
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ix = i1[:, 0] if dx else i0[:, 0]
                iy = i1[:, 1] if dy else i0[:, 1]
                iz = i1[:, 2] if dz else i0[:, 2]
                wt = ((f[:, 0] if dx else 1 - f[:, 0])
                      * (f[:, 1] if dy else 1 - f[:, 1])
                      * (f[:, 2] if dz else 1 - f[:, 2]))
                srcs.append((ix * res + iy) * res + iz)
                dsts.append(pix)
                ws.append(w_comp * wt)
    return RayBundle(
        src=np.concatenate(srcs), dst=np.concatenate(dsts), w=np.concatenate(ws),
        weights=weights, t_final=trans[:, -1], n_pixels=n_pix, grid_resolution=res,
    )


def render_bundle(bundle: RayBundle, color: ColorField, cfg: RenderConfig) -> Tensor:
    """Differentiable image (pixels, 3) from precomputed ray quantities."""
    grid2d = ad.reshape(color.activated(), (3, bundle.grid_resolution ** 3))
    img = ad.sparse_mix(grid2d, bundle.src, bundle.dst, bundle.w, bundle.n_pixels)
    bg = np.asarray(cfg.background)[None, :] * bundle.t_final[:, None]
    return ad.add(img, ad.constant(bg))


def render(density: DensityGrid, color: ColorField, pose: tuple[float, float],
           cfg: RenderConfig) -> Tensor:
    """Orthographic alpha-composited view, differentiable in the color field."""
    bundle = build_ray_bundle(density, pose, cfg)
    img = render_bundle(bundle, color, cfg)
    return ad.reshape(img, (cfg.image_size, cfg.image_size, 3))


# ---------------------------------------------------------------------------
# Toy 2D critic
# ---------------------------------------------------------------------------

@dataclass
class CriticConfig:
    image_size: int = 64
    vocab_size: int = len(KEYWORD_VOCAB)
    T: int = 100
    epochs: int = 30
    batch: int = 8
    lr: float = 2e-3
    dropout: float = 0.1  # keyword dropout so the null branch is trained
    seed: int = 0


class _ResBlock2d:
    def __init__(self, store, name, ch, temb_dim, rng):
        self.n1 = nn.GroupNorm(store, f"{name}.n1", ch, groups=4)
        self.c1 = nn.Conv2d(store, f"{name}.c1", ch, ch, 3, rng, pad=1)
        self.temb = nn.Linear(store, f"{name}.temb", temb_dim, ch, rng)
        self.n2 = nn.GroupNorm(store, f"{name}.n2", ch, groups=4)
        self.c2 = nn.Conv2d(store, f"{name}.c2", ch, ch, 3, rng, pad=1)

    def __call__(self, x, temb):
        h = self.c1(ad.silu(self.n1(x)))
        tproj = self.temb(ad.silu(temb))
        h = ad.add(h, ad.reshape(tproj, tproj.shape + (1, 1)))
        h = self.c2(ad.silu(self.n2(h)))
        return ad.add(x, h)


class _CrossAttention2d:
    def __init__(self, store, name, ch, rng):
        self.norm = nn.GroupNorm(store, f"{name}.norm", ch, groups=4)
        self.q = nn.Linear(store, f"{name}.q", ch, ch, rng)
        self.k = nn.Linear(store, f"{name}.k", CRITIC_EMBED, ch, rng)
        self.v = nn.Linear(store, f"{name}.v", CRITIC_EMBED, ch, rng)
        self.out = nn.Linear(store, f"{name}.out", ch, ch, rng)

    def __call__(self, x, tokens):
        n, ch = x.shape[0], x.shape[1]
        sites = int(np.prod(x.shape[2:]))
        h = ad.transpose(ad.reshape(self.norm(x), (n, ch, sites)), (0, 2, 1))
        att = ad.scaled_dot_attention(self.q(h), self.k(tokens), self.v(tokens))
        att = ad.transpose(self.out(att), (0, 2, 1))
        return ad.add(x, ad.reshape(att, x.shape))


class Critic2D:
    """Keyword-conditional DDPM over 64x64 RGB renders; frozen during texturing."""

    def __init__(self, config: CriticConfig, store: Optional[ParamStore] = None):
        self.config = config
        self.sched = default_schedule(config.T)
        fresh = store is None
        self.store = store or ParamStore()
        rng = np.random.default_rng(config.seed)

        def build(s):
            m = {}
            m["emb"] = nn.Embedding(s, "critic.emb", config.vocab_size, CRITIC_EMBED,
                                    rng, std=0.5)
            m["t1"] = nn.Linear(s, "critic.t1", 32, 64, rng)
            m["t2"] = nn.Linear(s, "critic.t2", 64, 64, rng)
            m["in"] = nn.Conv2d(s, "critic.in", 3, 8, 3, rng, pad=1)
            m["d1"] = nn.Conv2d(s, "critic.d1", 8, 16, 2, rng, stride=2)    # 32
            m["rb1"] = _ResBlock2d(s, "critic.rb1", 16, 64, rng)
            m["d2"] = nn.Conv2d(s, "critic.d2", 16, 32, 2, rng, stride=2)   # 16
            m["rb2"] = _ResBlock2d(s, "critic.rb2", 32, 64, rng)
            m["at2"] = _CrossAttention2d(s, "critic.at2", 32, rng)
            m["d3"] = nn.Conv2d(s, "critic.d3", 32, 48, 2, rng, stride=2)   # 8
            m["rb3"] = _ResBlock2d(s, "critic.rb3", 48, 64, rng)
            m["at3"] = _CrossAttention2d(s, "critic.at3", 48, rng)
            m["u1"] = nn.ConvTranspose2d(s, "critic.u1", 48, 32, 2, rng, stride=2)
            m["m1"] = nn.Conv2d(s, "critic.m1", 64, 32, 1, rng)
            m["rb4"] = _ResBlock2d(s, "critic.rb4", 32, 64, rng)
            m["u2"] = nn.ConvTranspose2d(s, "critic.u2", 32, 16, 2, rng, stride=2)
            m["m2"] = nn.Conv2d(s, "critic.m2", 32, 16, 1, rng)
            m["rb5"] = _ResBlock2d(s, "critic.rb5", 16, 64, rng)
            m["u3"] = nn.ConvTranspose2d(s, "critic.u3", 16, 8, 2, rng, stride=2)
            m["m3"] = nn.Conv2d(s, "critic.m3", 16, 8, 1, rng)
            m["outn"] = nn.GroupNorm(s, "critic.outn", 8, groups=4)
            m["out"] = nn.Conv2d(s, "critic.out", 8, 3, 3, rng, pad=1)
            return m

        if fresh:
            self.m = build(self.store)
        else:
            tmp = ParamStore()
            self.m = build(tmp)
            remap = {t.id: self.store[nm] for nm, t in tmp.params.items()
                     if nm in self.store.params}
            if len(remap) != len(tmp.params):
                raise ValueError("critic checkpoint does not match architecture")
            for part in self.m.values():
                targets = vars(part).values() if isinstance(
                    part, (_ResBlock2d, _CrossAttention2d)) else [part]
                for sub in targets:
                    for attr in ("w", "b", "gamma", "beta", "table"):
                        if hasattr(sub, attr):
                            setattr(sub, attr, remap[getattr(sub, attr).id])

    def weight(self, t: int) -> float:
        """SDS time weighting w(t) = 1 - alpha_bar_t."""
        return 1.0 - self.sched.alpha_bar(t)

    def encode_keywords(self, token_id_lists: Sequence[Sequence[int]]) -> Tensor:
        n = len(token_id_lists)
        ids = np.zeros((n, MAX_CRITIC_TOKENS), dtype=np.int64)
        keep = np.zeros((n, MAX_CRITIC_TOKENS, 1))
        for i, lst in enumerate(token_id_lists):
            if len(lst) > MAX_CRITIC_TOKENS:
                raise ValueError("too many keyword tokens")
            for j, tok in enumerate(lst):
                ids[i, j] = tok
                keep[i, j, 0] = 1.0
        return ad.mul(self.m["emb"](ids), ad.constant(keep))

    def predict(self, x: Tensor, t: np.ndarray, tokens: Tensor) -> Tensor:
        m = self.m
        temb = m["t2"](ad.silu(m["t1"](ad.constant(nn.sinusoidal_time_embedding(t, 32)))))
        # renders live in [0, 1]; center the network input (pure feature map,
        # the noise target stays in the renderer's domain)
        x = ad.add(ad.scale(x, 2.0), ad.constant(np.full(1, -1.0)))
        h0 = m["in"](x)              # 8 @ 64
        h1 = m["d1"](h0)             # 16 @ 32
        h1 = m["rb1"](h1, temb)
        h2 = m["d2"](h1)             # 32 @ 16
        h2 = m["rb2"](h2, temb)
        h2 = m["at2"](h2, tokens)
        h3 = m["d3"](h2)             # 48 @ 8
        h3 = m["rb3"](h3, temb)
        h3 = m["at3"](h3, tokens)
        u = m["u1"](h3)
        u = m["m1"](ad.concat([u, h2], axis=1))
        u = m["rb4"](u, temb)
        u = m["u2"](u)
        u = m["m2"](ad.concat([u, h1], axis=1))
        u = m["rb5"](u, temb)
        u = m["u3"](u)
        u = m["m3"](ad.concat([u, h0], axis=1))
        return m["out"](ad.silu(m["outn"](u)))

    def predict_np(self, image: np.ndarray, t: int, token_ids: Sequence[int]) -> np.ndarray:
        """(64, 64, 3) noisy image -> predicted noise, inference path."""
        x = ad.constant(np.moveaxis(image, -1, 0)[None])
        tokens = self.encode_keywords([list(token_ids)])
        out = self.predict(x, np.array([t]), tokens)
        return np.moveaxis(out.data[0], 0, -1)

    def sample(self, token_ids: Sequence[int], seed: int) -> np.ndarray:
        """Ancestral sample conditioned on keywords; returns (64, 64, 3).

        The denoised estimate is clamped to the renderer's [0, 1] range at
        every step so the tiny model's prediction errors cannot compound off
        the data manifold.
        """
        rng = np.random.default_rng(seed)
        n = self.config.image_size
        x = rng.standard_normal((n, n, 3))
        for t in range(self.sched.T, 0, -1):
            eps = self.predict_np(x, t, token_ids)
            ab = self.sched.alpha_bar(t)
            ab_prev = self.sched.alpha_bar(t - 1)
            x0 = np.clip((x - np.sqrt(1 - ab) * eps) / np.sqrt(ab), 0.0, 1.0)
            beta = self.sched.beta(t)
            mean = (np.sqrt(ab_prev) * beta / (1 - ab) * x0
                    + np.sqrt(self.sched.alpha(t)) * (1 - ab_prev) / (1 - ab) * x)
            if t > 1:
                x = mean + np.sqrt(self.sched.posterior_variance(t)) * rng.standard_normal(x.shape)
            else:
                x = mean
        return x

    def save(self, path_prefix: str) -> None:
        self.store.save(path_prefix + ".ckpt")
        with open(path_prefix + ".json", "w") as f:
            json.dump(asdict(self.config), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path_prefix: str) -> "Critic2D":
        with open(path_prefix + ".json") as f:
            cfg = CriticConfig(**json.load(f))
        return cls(cfg, store=ParamStore.load(path_prefix + ".ckpt"))


def build_critic_dataset(ds: Dataset, n_shapes: int, seed: int,
                         cfg: Optional[RenderConfig] = None,
                         color_words: Optional[Sequence[str]] = None,
                         poses_per_pair: int = 2):
    """Render flat-colored shapes: poses_per_pair images per (shape, color word).

    Pose variety matters: score distillation later renders from the whole pose
    set, so the critic must have seen the silhouettes from many directions.
    """
    cfg = cfg or RenderConfig()
    words = list(color_words or PALETTE)
    rng = np.random.default_rng(seed)
    images, token_lists = [], []
    shapes = ds.train[:n_shapes]
    poses = cfg.poses()
    for s in shapes:
        density = tsdf_to_density(s.grid, VOLSDF_ALPHA, VOLSDF_BETA)
        bundles = [build_ray_bundle(density, poses[i], cfg)
                   for i in rng.choice(len(poses), size=poses_per_pair, replace=False)]
        for word in words:
            color = np.asarray(PALETTE[word])
            for bundle in bundles:
                img = bundle.weights.sum(axis=1)[:, None] * color[None, :] \
                    + bundle.t_final[:, None] * np.asarray(cfg.background)[None, :]
                images.append(img.reshape(cfg.image_size, cfg.image_size, 3))
                token_lists.append([ds.vocab.index(word)])
    return np.stack(images), token_lists


def train_toy_critic(images: np.ndarray, token_lists: Sequence[Sequence[int]],
                     config: Optional[CriticConfig] = None,
                     log=None) -> tuple[Critic2D, list[float]]:
    """Standard DDPM training of the keyword-conditional 2D UNet."""
    config = config or CriticConfig()
    critic = Critic2D(config)
    rng = np.random.default_rng(config.seed + 23)
    x0 = np.moveaxis(images, -1, 1)  # (n, 3, 64, 64)
    n = len(x0)
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, config.batch):
            idx = order[start:start + config.batch]
            b = len(idx)
            t = rng.integers(1, critic.sched.T + 1, size=b)
            eps = rng.standard_normal(x0[idx].shape)
            ab = critic.sched.alpha_bars[t - 1][:, None, None, None]
            x_t = np.sqrt(ab) * x0[idx] + np.sqrt(1.0 - ab) * eps
            drop = rng.random(b) < config.dropout
            batch_tokens = [[] if drop[j] else list(token_lists[i])
                            for j, i in enumerate(idx)]
            try:
                with ad.Tape() as tape:
                    tokens = critic.encode_keywords(batch_tokens)
                    pred = critic.predict(ad.constant(x_t), t, tokens)
                    loss = ad.mse(pred, ad.constant(eps))
                grads = ad.backward(tape, loss)
            except ad.NonFiniteError as e:
                raise TrainingDiverged(f"critic diverged at epoch {epoch}: {e}") from e
            ad.adam_step(critic.store, grads, config.lr)
            total += loss.item()
            count += 1
        curve.append(total / count)
        if log:
            log(f"critic epoch {epoch}: loss {curve[-1]:.5f}")
    return critic, curve


# ---------------------------------------------------------------------------
# Score distillation
# ---------------------------------------------------------------------------

DEFAULT_SDS_GUIDANCE = 10.0


def sds_grad(critic: Critic2D, color: ColorField, tape: ad.Tape, image: Tensor,
             token_ids: Sequence[int], t: int, eps: np.ndarray,
             guidance: float = DEFAULT_SDS_GUIDANCE) -> ad.Gradients:
    """Gradient of the color parameters from one SDS step.

    Forms x_t = q_sample(I, t, eps) in the critic's schedule and backpropagates
    w(t) * (eps_hat - eps) through the renderer only; the critic is evaluated
    off-tape so no gradient can reach (or update) its weights. The critic's
    effective prediction eps_hat applies classifier-free guidance between its
    conditional and null branches: the toy critic's shared (condition-free)
    prediction bias cancels in the difference, leaving the keyword direction.
    """
    img = image.data.reshape(critic.config.image_size, critic.config.image_size, 3)
    if eps.shape != img.shape:
        raise ValueError(f"noise shape {eps.shape} != image shape {img.shape}")
    x_t = q_sample(img, t, eps, critic.sched)
    eps_cond = critic.predict_np(x_t, t, token_ids)
    if guidance == 1.0:
        eps_hat = eps_cond
    else:
        eps_null = critic.predict_np(x_t, t, [])
        eps_hat = eps_null + guidance * (eps_cond - eps_null)
    residual = critic.weight(t) * (eps_hat - eps)
    with tape:  # extend the render tape with the constant-residual contraction
        proxy = ad.tsum(ad.mul(image, ad.constant(residual.reshape(image.shape))))
    return ad.backward(tape, proxy)


@dataclass
class TextureConfig:
    steps: int = 250
    lr: float = 0.05
    color_resolution: int = 16
    # Draw SDS timesteps from the band where the render is still visible
    # through the noise; the toy critic carries no usable signal near t = T.
    t_max_frac: float = 0.5
    guidance: float = DEFAULT_SDS_GUIDANCE
    render: RenderConfig = field(default_factory=RenderConfig)


def texture_shape(grid: TsdfGrid, keywords: Sequence[str], critic: Critic2D,
                  steps: Optional[int] = None, cfg: Optional[TextureConfig] = None,
                  seed: int = 0, vocab: Sequence[str] = KEYWORD_VOCAB,
                  log=None) -> ColorField:
    """SDS texturing loop: density fixed, Adam on the color voxels only."""
    cfg = cfg or TextureConfig()
    n_steps = cfg.steps if steps is None else steps
    token_ids = [list(vocab).index(w) for w in keywords]
    density = tsdf_to_density(grid, VOLSDF_ALPHA, VOLSDF_BETA)
    color = ColorField(cfg.color_resolution)
    bundles = [build_ray_bundle(density, p, cfg.render) for p in cfg.render.poses()]
    rng = np.random.default_rng(seed)
    size = cfg.render.image_size
    t_hi = max(1, int(round(critic.sched.T * cfg.t_max_frac)))
    for step in range(n_steps):
        bundle = bundles[rng.integers(len(bundles))]
        t = int(rng.integers(1, t_hi + 1))
        eps = rng.standard_normal((size, size, 3))
        try:
            with ad.Tape() as tape:
                image = render_bundle(bundle, color, cfg.render)
            grads = sds_grad(critic, color, tape, image, token_ids, t, eps,
                             guidance=cfg.guidance)
        except ad.NonFiniteError as e:
            raise TrainingDiverged(f"texturing diverged at step {step}: {e}") from e
        ad.adam_step(color.store, grads, cfg.lr)
        if log and (step + 1) % 50 == 0:
            log(f"sds step {step + 1}/{n_steps}")
    return color


def surface_mean_color(grid: TsdfGrid, color: ColorField, n_points: int = 512,
                       seed: int = 0) -> np.ndarray:
    """Mean queried color over surface sample points (texturing diagnostics)."""
    from . import geometry as geo
    mesh = geo.marching_cubes(grid)
    pts = geo.sample_surface_points(mesh, n_points, seed)
    return color.query(pts).mean(axis=0)
