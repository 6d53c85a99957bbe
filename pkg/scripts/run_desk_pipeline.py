#!/usr/bin/env python3
"""End-to-end desk pipeline: dataset -> VQ-VAE -> diffusion -> critic -> outputs.

Writes everything under --out (default ./desk_run): the dataset, all three
checkpoints, a sampled mesh per class, one shape completion, and a textured
mesh. Expect roughly 35-50 minutes on two CPU cores with the default sizes;
use --quick for a structural smoke run in a couple of minutes.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from sdfgen import conditioning as cond
from sdfgen import dataset as dst
from sdfgen import diffusion as df
from sdfgen import geometry as geo
from sdfgen import metrics as mx
from sdfgen import texturing as tx
from sdfgen import vqvae as vq


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="desk_run")
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--quick", action="store_true",
                    help="tiny sizes: checks plumbing, not quality")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    n = 60 if args.quick else 500
    vq_epochs = 2 if args.quick else 30
    df_epochs = 2 if args.quick else 50
    cr_epochs = 2 if args.quick else 30
    sds_steps = 10 if args.quick else 250

    t0 = time.time()
    print(f"[1/6] dataset: {n} shapes")
    ds = dst.build_dataset(n, seed=args.seed, split_ratio=0.9)
    dst.save_dataset(ds, os.path.join(args.out, "dataset"))

    print(f"[2/6] vq-vae: {vq_epochs} epochs")
    vae, curve = vq.train_vqvae(ds, vq.VqVaeConfig(epochs=vq_epochs, seed=3, lr=3e-3),
                                log=print)
    vae.save(os.path.join(args.out, "vqvae"))
    ious = [vq.interior_iou(s.grid, vae.reconstruct(s.grid)) for s in ds.test]
    print(f"      held-out interior IoU {np.mean(ious):.3f}")

    print(f"[3/6] diffusion: {df_epochs} epochs")
    dcfg = df.DiffusionConfig(n_classes=len(ds.categories), vocab_size=len(ds.vocab),
                              epochs=df_epochs, seed=7)
    den, sched, dcurve = df.train_diffusion(ds, vae, dcfg, log=print)
    den.save(os.path.join(args.out, "diffusion"))

    print(f"[4/6] critic: {cr_epochs} epochs")
    images, tokens = tx.build_critic_dataset(ds, n_shapes=min(20, len(ds.train)), seed=2)
    critic, ccurve = tx.train_toy_critic(
        images, tokens, tx.CriticConfig(vocab_size=len(ds.vocab), epochs=cr_epochs, seed=2),
        log=print)
    critic.save(os.path.join(args.out, "critic"))

    print("[5/6] one sample per class + one completion")
    enc = den.conditioners
    for cid, cat in enumerate(ds.categories):
        payload = cond.ClassLabel(cid)
        cs = cond.ConditionSet([cond.ConditionEntry(payload,
                                                    enc.encode_condition(payload), 2.0)])
        z = df.sample(den, sched, cs, seed=100 + cid)
        mesh = geo.marching_cubes(vae.decode(vae.quantize(z)[0]))
        geo.save_obj(mesh, os.path.join(args.out, f"sample_{cat}.obj"))
        print(f"      {cat}: {len(mesh.faces)} faces")
    sample = ds.test[0]
    comp = df.blended_completion(den, sched, vae, sample.partial, sample.mask,
                                 cond.ConditionSet([]), seed=9)
    geo.save_obj(geo.marching_cubes(comp), os.path.join(args.out, "completion.obj"))

    print(f"[6/6] texture a shape red ({sds_steps} SDS steps)")
    grid = ds.test[0].grid
    color = tx.texture_shape(grid, ["red"], critic, steps=sds_steps, seed=4,
                             vocab=ds.vocab)
    mesh = geo.marching_cubes(grid)
    geo.save_obj(mesh, os.path.join(args.out, "textured.obj"),
                 vertex_colors=color.query(mesh.vertices))

    cfg = {"dataset": os.path.join(args.out, "dataset"),
           "vqvae": os.path.join(args.out, "vqvae"),
           "diffusion": os.path.join(args.out, "diffusion"),
           "critic": os.path.join(args.out, "critic"),
           "port": 8642, "queue_capacity": 8, "workers": 1}
    with open(os.path.join(args.out, "run.json"), "w") as f:
        json.dump(cfg, f, indent=2)
    print(f"done in {(time.time() - t0) / 60:.1f} min; "
          f"serve with: sdfgen serve --config {args.out}/run.json")


if __name__ == "__main__":
    main()
