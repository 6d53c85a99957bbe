"""3D VQ-VAE: strided conv encoder, codebook quantizer, transposed-conv decoder.

The encoder compresses a D^3 TSDF to a (D/4)^3 x c continuous latent; the
quantizer snaps each latent site to its nearest codebook entry (lowest index
on ties) with a straight-through gradient; the decoder maps quantized latents
back to a TSDF bounded by +-truncation through a scaled tanh.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ParamStore, Tensor
from .dataset import Dataset
from .geometry import TsdfGrid


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class VqVaeConfig:
    resolution: int = 16
    latent_extent: int = 4
    channels: int = 8
    codebook_size: int = 256
    enc_channels: tuple = (16, 32, 64)
    truncation: float = 0.2
    beta_commit: float = 0.25
    epochs: int = 18
    batch: int = 8
    lr: float = 2e-3
    seed: int = 0


class VqVaeModel:
    def __init__(self, config: VqVaeConfig, store: ParamStore | None = None):
        self.config = config
        c = config.channels
        h0, h1, h2 = config.enc_channels
        fresh = store is None
        self.store = store if store is not None else ParamStore()
        rng = np.random.default_rng(config.seed)

        def build(s: ParamStore):
            # Full-resolution k3 convs are memory-bound on this target; keep their
            # channel counts minimal and do the wide work at 8^3 and 4^3.
            e, d = {}, {}
            e["c1"] = nn.Conv3d(s, "enc.c1", 2, h0, 3, rng, pad=1)
            e["n1"] = nn.GroupNorm(s, "enc.n1", h0, groups=4)
            e["c2"] = nn.Conv3d(s, "enc.c2", h0, h1, 2, rng, stride=2)
            e["n2"] = nn.GroupNorm(s, "enc.n2", h1, groups=4)
            e["c3"] = nn.Conv3d(s, "enc.c3", h1, h1, 3, rng, pad=1)
            e["n3"] = nn.GroupNorm(s, "enc.n3", h1, groups=4)
            e["c4"] = nn.Conv3d(s, "enc.c4", h1, h2, 2, rng, stride=2)
            e["n4"] = nn.GroupNorm(s, "enc.n4", h2, groups=4)
            e["c5"] = nn.Conv3d(s, "enc.c5", h2, c, 3, rng, pad=1)
            d["c1"] = nn.Conv3d(s, "dec.c1", c, h2, 3, rng, pad=1)
            d["n1"] = nn.GroupNorm(s, "dec.n1", h2, groups=4)
            d["u1"] = nn.ConvTranspose3d(s, "dec.u1", h2, h1, 4, rng, stride=2, pad=1)
            d["n2"] = nn.GroupNorm(s, "dec.n2", h1, groups=4)
            d["c2"] = nn.Conv3d(s, "dec.c2", h1, h1, 3, rng, pad=1)
            d["n3"] = nn.GroupNorm(s, "dec.n3", h1, groups=4)
            d["c3"] = nn.Conv3d(s, "dec.c3", h1, h1, 3, rng, pad=1)
            d["n3b"] = nn.GroupNorm(s, "dec.n3b", h1, groups=4)
            d["u2"] = nn.ConvTranspose3d(s, "dec.u2", h1, 16, 4, rng, stride=2, pad=1)
            d["n4"] = nn.GroupNorm(s, "dec.n4", 16, groups=4)
            d["c4"] = nn.Conv3d(s, "dec.c4", 16, 1, 3, rng, pad=1)
            cb = s.add("codebook", rng.normal(0.0, 0.1, (config.codebook_size, c)))
            return e, d, cb

        if fresh:
            self.enc, self.dec, self.codebook = build(self.store)
        else:
            # Rebuild the layer graph on a fresh store, then swap in loaded tensors.
            tmp = ParamStore()
            self.enc, self.dec, self.codebook = build(tmp)
            self._adopt(tmp)

    def _adopt(self, tmp: ParamStore) -> None:
        if set(tmp.params) != set(self.store.params):
            missing = set(tmp.params) ^ set(self.store.params)
            raise ValueError(f"checkpoint does not match architecture: {sorted(missing)[:4]}")
        for name, t in tmp.params.items():
            if t.shape != self.store[name].shape:
                raise ValueError(f"parameter {name} shape {self.store[name].shape} != {t.shape}")
        remap = {t.id: self.store[name] for name, t in tmp.params.items()}
        for obj in (self.enc, self.dec):
            for layer in obj.values():
                for attr in ("w", "b", "gamma", "beta", "table"):
                    if hasattr(layer, attr):
                        setattr(layer, attr, remap[getattr(layer, attr).id])
        self.codebook = remap[self.codebook.id]

    # ---- batched tensor paths -------------------------------------------------

    def encode_t(self, x: Tensor) -> Tensor:
        e = self.enc
        # Scaled distances plus an explicit interior-occupancy channel: sign
        # fidelity is what reconstruction quality is judged on downstream.
        occ = np.where(x.data < 0.0, 1.0, -1.0)
        x = ad.concat([ad.scale(x, 1.0 / self.config.truncation), ad.constant(occ)], axis=1)
        h = ad.silu(e["n1"](e["c1"](x)))
        h = ad.silu(e["n2"](e["c2"](h)))
        h = ad.silu(e["n3"](e["c3"](h)))
        h = ad.silu(e["n4"](e["c4"](h)))
        return e["c5"](h)

    def decode_t(self, z: Tensor) -> Tensor:
        d = self.dec
        h = ad.silu(d["n1"](d["c1"](z)))
        h = ad.silu(d["n2"](d["u1"](h)))
        h = ad.silu(d["n3"](d["c2"](h)))
        h = ad.silu(d["n3b"](d["c3"](h)))
        h = ad.silu(d["n4"](d["u2"](h)))
        return ad.scale(ad.tanh(d["c4"](h)), self.config.truncation)

    def nearest_indices(self, sites: np.ndarray) -> np.ndarray:
        """Nearest codebook row per site vector (m, c); lowest index wins ties."""
        cb = self.codebook.data
        d2 = (sites * sites).sum(1)[:, None] - 2.0 * sites @ cb.T + (cb * cb).sum(1)[None, :]
        return np.argmin(d2, axis=1)

    def quantize_t(self, z_e: Tensor) -> tuple[Tensor, Tensor, np.ndarray]:
        """Returns (straight-through latent, codebook-path latent, index grid)."""
        n, c = z_e.shape[0], z_e.shape[1]
        d = self.config.latent_extent
        sites = np.moveaxis(z_e.data, 1, -1).reshape(-1, c)
        idx = self.nearest_indices(sites).reshape(n, d, d, d)
        z_q = ad.embedding_lookup(self.codebook, idx)           # (n, d, d, d, c)
        z_q = ad.transpose(z_q, (0, 4, 1, 2, 3))                # (n, c, d, d, d)
        z_st = ad.straight_through(z_e, z_q)
        return z_st, z_q, idx

    # ---- single-grid conveniences ---------------------------------------------

    def encode(self, grid: TsdfGrid) -> np.ndarray:
        """Continuous latent (c, d, d, d) of one grid."""
        if grid.resolution != self.config.resolution:
            raise ValueError(
                f"grid resolution {grid.resolution} != model resolution {self.config.resolution}"
            )
        x = ad.constant(grid.values[None, None])
        return self.encode_t(x).data[0]

    def quantize(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(quantized latent, index grid) for a (c, d, d, d) latent."""
        c = z.shape[0]
        sp = z.shape[1:]
        idx = self.nearest_indices(np.moveaxis(z, 0, -1).reshape(-1, c)).reshape(sp)
        zq = np.moveaxis(self.codebook.data[idx], -1, 0)
        return zq, idx

    def decode(self, z: np.ndarray) -> TsdfGrid:
        """Decode a (c, d, d, d) latent back to a TSDF grid."""
        d = self.config.latent_extent
        if z.shape != (self.config.channels, d, d, d):
            raise ValueError(f"latent shape {z.shape} != ({self.config.channels}, {d}, {d}, {d})")
        out = self.decode_t(ad.constant(z[None])).data[0, 0]
        return TsdfGrid(self.config.resolution, self.config.truncation, out)

    def reconstruct(self, grid: TsdfGrid) -> TsdfGrid:
        zq, _ = self.quantize(self.encode(grid))
        return self.decode(zq)

    def codebook_usage(self, grids: list[TsdfGrid]) -> float:
        used = set()
        for g in grids:
            _, idx = self.quantize(self.encode(g))
            used.update(np.unique(idx).tolist())
        return len(used) / self.config.codebook_size

    # ---- persistence ------------------------------------------------------------

    def save(self, path_prefix: str) -> None:
        self.store.save(path_prefix + ".ckpt")
        cfg = asdict(self.config)
        cfg["enc_channels"] = list(cfg["enc_channels"])
        with open(path_prefix + ".json", "w") as f:
            json.dump(cfg, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path_prefix: str) -> "VqVaeModel":
        with open(path_prefix + ".json") as f:
            cfg = json.load(f)
        cfg["enc_channels"] = tuple(cfg["enc_channels"])
        store = ParamStore.load(path_prefix + ".ckpt")
        return cls(VqVaeConfig(**cfg), store=store)


def vqvae_loss(x: Tensor, x_rec: Tensor, z_e: Tensor, z_q: Tensor,
               beta_commit: float, term_scale: float = 1.0) -> Tensor:
    """L1 reconstruction + codebook pull + commitment, with stop-gradients placed
    so the VQ term moves only the codebook and the commitment only the encoder.

    The quantizer terms are whole-tensor squared norms; `term_scale` lets the
    trainer average them per latent element (the raw sum swamps the pointwise
    reconstruction gradient and collapses the codebook at this scale).
    """
    rec = ad.l1(x_rec, x)
    d_vq = ad.add(z_q, ad.scale(ad.stop_gradient(z_e), -1.0))
    vq = ad.tsum(ad.mul(d_vq, d_vq))
    d_cm = ad.add(z_e, ad.scale(ad.stop_gradient(z_q), -1.0))
    commit = ad.tsum(ad.mul(d_cm, d_cm))
    quant = ad.add(vq, ad.scale(commit, beta_commit))
    return ad.add(rec, ad.scale(quant, term_scale))


def interior_iou(a: TsdfGrid, b: TsdfGrid) -> float:
    """Sign-agreement IoU of the interiors (values < 0)."""
    ia, ib = a.values < 0, b.values < 0
    union = np.logical_or(ia, ib).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(ia, ib).sum() / union)


def _init_codebook_from_data(model: VqVaeModel, grids: np.ndarray,
                             rng: np.random.Generator) -> None:
    """Seed codebook rows with encoder outputs so most entries start assignable."""
    take = min(len(grids), 64)
    z = model.encode_t(ad.constant(grids[:take, None])).data
    sites = np.moveaxis(z, 1, -1).reshape(-1, model.config.channels)
    k = model.config.codebook_size
    if len(sites) >= k:
        pick = rng.choice(len(sites), size=k, replace=False)
    else:
        pick = rng.integers(0, len(sites), size=k)
    jitter = rng.normal(0.0, 1e-3, (k, model.config.channels))
    model.codebook.data[...] = sites[pick] + jitter


def train_vqvae(ds: Dataset, config: VqVaeConfig | None = None,
                log=None) -> tuple[VqVaeModel, list[float]]:
    """Train on the dataset's train split; returns the model and epoch-mean losses."""
    config = config or VqVaeConfig()
    if config.resolution != ds.resolution:
        raise ValueError("config resolution does not match dataset")
    train = ds.train
    if not train:
        raise ValueError("empty training set")
    model = VqVaeModel(config)
    rng = np.random.default_rng(config.seed + 1)
    grids = np.stack([s.grid.values for s in train])
    _init_codebook_from_data(model, grids, rng)

    curve = []
    n = len(train)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        lr = config.lr * (0.3 if epoch >= int(config.epochs * 0.85) else 1.0)
        used = np.zeros(config.codebook_size, dtype=bool)
        site_pool = None
        for start in range(0, n, config.batch):
            idx = order[start:start + config.batch]
            x = ad.constant(grids[idx][:, None])
            try:
                with ad.Tape() as tape:
                    z_e = model.encode_t(x)
                    z_st, z_q, sel = model.quantize_t(z_e)
                    x_rec = model.decode_t(z_st)
                    loss = vqvae_loss(x, x_rec, z_e, z_q, config.beta_commit,
                                      term_scale=1.0 / z_e.size)
                grads = ad.backward(tape, loss)
            except ad.NonFiniteError as e:
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}: {e}") from e
            ad.adam_step(model.store, grads, lr)
            used[np.unique(sel)] = True
            site_pool = np.moveaxis(z_e.data, 1, -1).reshape(-1, config.channels)
            total += loss.item()
            batches += 1
        # Revive entries untouched this epoch so capacity is not lost to dead
        # codes (re-seed from current encoder outputs; deterministic per seed).
        dead = np.flatnonzero(~used)
        if dead.size and epoch < config.epochs - 1:
            pick = rng.integers(0, len(site_pool), size=dead.size)
            model.codebook.data[dead] = site_pool[pick] + rng.normal(0.0, 1e-3, (dead.size, config.channels))
        curve.append(total / batches)
        if log:
            log(f"vqvae epoch {epoch}: loss {curve[-1]:.5f} dead {dead.size}")
    return model, curve
