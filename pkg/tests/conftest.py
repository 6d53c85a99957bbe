"""Shared fixtures: the desk-scale dataset and trained model stack.

Training fixtures are session-scoped so the acceptance criteria share one
VQ-VAE / diffusion / critic run. Set SDFGEN_ACCEPT_CACHE to a directory to
reuse checkpoints across pytest invocations while iterating locally; leave it
unset for a full from-scratch verification run.
"""

import os
import time

import numpy as np
import pytest

from sdfgen import dataset as dst
from sdfgen import diffusion as df
from sdfgen import texturing as tx
from sdfgen import vqvae as vq

DESK_SEED = 11


def _cache_dir():
    return os.environ.get("SDFGEN_ACCEPT_CACHE")


@pytest.fixture(scope="session")
def desk_dataset():
    return dst.build_dataset(500, seed=DESK_SEED, split_ratio=0.9)


@pytest.fixture(scope="session")
def desk_vqvae(desk_dataset):
    cache = _cache_dir()
    prefix = os.path.join(cache, "vqvae") if cache else None
    if prefix and os.path.exists(prefix + ".ckpt"):
        model = vq.VqVaeModel.load(prefix)
        return model, {"train_seconds": 0.0, "curve": [], "cached": True}
    t0 = time.time()
    model, curve = vq.train_vqvae(desk_dataset, vq.VqVaeConfig(epochs=30, seed=3, lr=3e-3))
    info = {"train_seconds": time.time() - t0, "curve": curve, "cached": False}
    if prefix:
        os.makedirs(cache, exist_ok=True)
        model.save(prefix)
        np.save(os.path.join(cache, "vq_curve.npy"), np.array(curve))
    return model, info


@pytest.fixture(scope="session")
def desk_diffusion(desk_dataset, desk_vqvae):
    vae, _ = desk_vqvae
    cache = _cache_dir()
    prefix = os.path.join(cache, "diffusion") if cache else None
    if prefix and os.path.exists(prefix + ".ckpt"):
        model = df.DenoiserModel.load(prefix)
        return model, df.default_schedule(model.config.T), {"train_seconds": 0.0}
    cfg = df.DiffusionConfig(n_classes=len(desk_dataset.categories),
                             vocab_size=len(desk_dataset.vocab),
                             grid_resolution=desk_dataset.resolution,
                             epochs=50, seed=7)
    t0 = time.time()
    model, sched, curve = df.train_diffusion(desk_dataset, vae, cfg)
    info = {"train_seconds": time.time() - t0, "curve": curve}
    if prefix:
        model.save(prefix)
    return model, sched, info


@pytest.fixture(scope="session")
def desk_critic(desk_dataset):
    cache = _cache_dir()
    prefix = os.path.join(cache, "critic") if cache else None
    if prefix and os.path.exists(prefix + ".ckpt"):
        return tx.Critic2D.load(prefix), {"train_seconds": 0.0}
    t0 = time.time()
    images, tokens = tx.build_critic_dataset(desk_dataset, n_shapes=20, seed=2)
    cfg = tx.CriticConfig(vocab_size=len(desk_dataset.vocab), epochs=30, seed=2)
    critic, curve = tx.train_toy_critic(images, tokens, cfg)
    info = {"train_seconds": time.time() - t0, "curve": curve}
    if prefix:
        os.makedirs(cache, exist_ok=True)
        critic.save(prefix)
    return critic, info
