"""Command-line entry points for every pipeline stage.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every run is
reproducible given --seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import conditioning as cond
from . import dataset as dst
from . import diffusion as df
from . import geometry as geo
from . import metrics as mx
from . import texturing as tx
from . import vqvae as vq
from .service import RunConfig, serve


class UsageError(SystemExit):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; the CLI
        self.print_usage(sys.stderr)  # contract reserves 2 for runtime failures
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sdfgen", description="Latent-diffusion shape generation toolkit")
    p.add_argument("--config", help="JSON run config (checkpoints, dataset, port)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out", help="output directory or file")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-dataset", help="generate the procedural shape dataset")
    g.add_argument("--n", type=int, default=500)
    g.add_argument("--resolution", type=int, default=16)
    g.add_argument("--split-ratio", type=float, default=0.8)

    t = sub.add_parser("train-vqvae", help="train the shape compressor")
    t.add_argument("--dataset", required=True)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=3e-3)

    d = sub.add_parser("train-diffusion", help="train the conditional latent DDPM")
    d.add_argument("--dataset", required=True)
    d.add_argument("--vqvae", required=True, help="checkpoint prefix")
    d.add_argument("--epochs", type=int, default=60)
    d.add_argument("--lr", type=float, default=2e-3)

    c = sub.add_parser("train-critic", help="train the toy 2D texture critic")
    c.add_argument("--dataset", required=True)
    c.add_argument("--n-shapes", type=int, default=24)
    c.add_argument("--epochs", type=int, default=16)

    s = sub.add_parser("sample", help="generate a shape from conditions")
    s.add_argument("--vqvae", required=True)
    s.add_argument("--diffusion", required=True)
    s.add_argument("--dataset", help="needed for class names / keywords / sample ids")
    s.add_argument("--class-label")
    s.add_argument("--keywords", help="comma-separated keyword list")
    s.add_argument("--silhouette-from", help="test sample id, e.g. test-3")
    s.add_argument("--partial-from", help="test sample id, e.g. test-3")
    s.add_argument("--weights", default="", help="modality=weight pairs, comma-separated")
    s.add_argument("--steps", type=int)

    k = sub.add_parser("complete", help="blended-diffusion shape completion")
    k.add_argument("--dataset", required=True)
    k.add_argument("--vqvae", required=True)
    k.add_argument("--diffusion", required=True)
    k.add_argument("--sample-index", type=int, default=0, help="index into the test split")
    k.add_argument("--mode", default="bottom-half", choices=dst.PARTIAL_MODES)
    k.add_argument("--k", type=int, default=1, help="number of seeded completions")

    x = sub.add_parser("texture", help="score-distillation texturing from keywords")
    x.add_argument("--critic", required=True)
    x.add_argument("--dataset")
    x.add_argument("--sample-index", type=int)
    x.add_argument("--tsdf", help="TSDF file to texture (alternative to dataset sample)")
    x.add_argument("--keywords", required=True)
    x.add_argument("--steps", type=int, default=250)

    e = sub.add_parser("evaluate", help="completion fidelity/diversity report")
    e.add_argument("--dataset", required=True)
    e.add_argument("--vqvae", required=True)
    e.add_argument("--diffusion", required=True)
    e.add_argument("--k", type=int, default=10)
    e.add_argument("--n-points", type=int, default=2048)
    e.add_argument("--n-shapes", type=int, default=0, help="0 = whole test split")

    v = sub.add_parser("serve", help="run the HTTP generation service")
    v.add_argument("--port", type=int)
    return p


def _need_checkpoint(prefix: str, what: str) -> None:
    if not os.path.exists(prefix + ".ckpt"):
        raise FileNotFoundError(f"{what} checkpoint not found: {prefix}.ckpt")


def _parse_weights(spec: str) -> dict[str, float]:
    weights = {}
    if spec:
        for pair in spec.split(","):
            name, _, value = pair.partition("=")
            if name not in cond.MODALITY_ORDER or not value:
                raise ValueError(f"bad weight spec {pair!r}; use modality=value")
            weights[name] = float(value)
    return weights


def _load_stack(args):
    _need_checkpoint(args.vqvae, "vqvae")
    _need_checkpoint(args.diffusion, "diffusion")
    vae = vq.VqVaeModel.load(args.vqvae)
    den = df.DenoiserModel.load(args.diffusion)
    return vae, den, den.config.schedule()


def _cmd_gen_dataset(args) -> int:
    ds = dst.build_dataset(args.n, seed=args.seed, split_ratio=args.split_ratio,
                           resolution=args.resolution)
    dst.save_dataset(ds, args.out)
    print(f"wrote {args.n} samples ({len(ds.train_ids)} train / {len(ds.test_ids)} test) "
          f"to {args.out}")
    return 0


def _cmd_train_vqvae(args) -> int:
    ds = dst.load_dataset(args.dataset)
    cfg = vq.VqVaeConfig(resolution=ds.resolution, truncation=ds.truncation,
                         epochs=args.epochs, lr=args.lr, seed=args.seed)
    model, curve = vq.train_vqvae(ds, cfg, log=print)
    os.makedirs(args.out, exist_ok=True)
    prefix = os.path.join(args.out, "vqvae")
    model.save(prefix)
    ious = [vq.interior_iou(s.grid, model.reconstruct(s.grid)) for s in ds.test]
    print(f"saved {prefix}.ckpt  heldout-iou {np.mean(ious):.3f}  "
          f"final-loss {curve[-1]:.5f}")
    return 0


def _cmd_train_diffusion(args) -> int:
    ds = dst.load_dataset(args.dataset)
    _need_checkpoint(args.vqvae, "vqvae")
    vae = vq.VqVaeModel.load(args.vqvae)
    cfg = df.DiffusionConfig(n_classes=len(ds.categories), vocab_size=len(ds.vocab),
                             grid_resolution=ds.resolution, epochs=args.epochs,
                             lr=args.lr, seed=args.seed)
    model, sched, curve = df.train_diffusion(ds, vae, cfg, log=print)
    os.makedirs(args.out, exist_ok=True)
    prefix = os.path.join(args.out, "diffusion")
    model.save(prefix)
    print(f"saved {prefix}.ckpt  final-loss {curve[-1]:.5f}")
    return 0


def _cmd_train_critic(args) -> int:
    ds = dst.load_dataset(args.dataset)
    images, tokens = tx.build_critic_dataset(ds, args.n_shapes, seed=args.seed)
    cfg = tx.CriticConfig(vocab_size=len(ds.vocab), epochs=args.epochs, seed=args.seed)
    critic, curve = tx.train_toy_critic(images, tokens, cfg, log=print)
    os.makedirs(args.out, exist_ok=True)
    prefix = os.path.join(args.out, "critic")
    critic.save(prefix)
    print(f"saved {prefix}.ckpt  final-loss {curve[-1]:.5f}")
    return 0


def _cmd_sample(args) -> int:
    vae, den, sched = _load_stack(args)
    ds = dst.load_dataset(args.dataset) if args.dataset else None
    weights = _parse_weights(args.weights)
    enc = den.conditioners
    entries = []

    def add(payload, modality):
        entries.append(cond.ConditionEntry(
            payload, enc.encode_condition(payload), weights.get(modality, 1.0)))

    if args.class_label is not None:
        if ds is None:
            raise ValueError("--class-label requires --dataset for class names")
        if args.class_label not in ds.categories:
            raise ValueError(f"unknown class {args.class_label!r}")
        add(cond.ClassLabel(ds.categories.index(args.class_label)), "class")
    if args.keywords:
        if ds is None:
            raise ValueError("--keywords requires --dataset for the vocabulary")
        words = [w.strip() for w in args.keywords.split(",") if w.strip()]
        add(cond.KeywordText([ds.vocab.index(w) for w in words]), "text")
    for arg, cls, modality in ((args.partial_from, cond.PartialShape, "partial"),
                               (args.silhouette_from, cond.Silhouette, "silhouette")):
        if arg:
            if ds is None:
                raise ValueError(f"--{modality}-from requires --dataset")
            idx = int(arg.split("-")[-1])
            sample = ds.test[idx]
            payload = (cond.PartialShape(sample.partial, sample.mask)
                       if modality == "partial" else cond.Silhouette(sample.silhouette))
            add(payload, modality)

    steps = args.steps or sched.T
    run_sched = sched if steps == sched.T else df.DiffusionSchedule(sched.betas[:steps])
    z = df.sample(den, run_sched, cond.ConditionSet(entries), args.seed)
    grid = vae.decode(vae.quantize(z)[0])
    mesh = geo.marching_cubes(grid)
    out = args.out if args.out.endswith(".obj") else args.out + ".obj"
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    geo.save_obj(mesh, out)
    print(f"wrote {out} ({len(mesh.faces)} faces)")
    return 0


def _cmd_complete(args) -> int:
    vae, den, sched = _load_stack(args)
    ds = dst.load_dataset(args.dataset)
    sample = ds.test[args.sample_index]
    partial, mask = dst.make_partial(sample.grid, args.mode, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    for j in range(args.k):
        grid = df.blended_completion(den, sched, vae, partial, mask,
                                     cond.ConditionSet([]), seed=args.seed + j)
        mesh = geo.marching_cubes(grid)
        path = os.path.join(args.out, f"completion_{j:02d}.obj")
        geo.save_obj(mesh, path)
        print(f"wrote {path} ({len(mesh.faces)} faces)")
    return 0


def _cmd_texture(args) -> int:
    _need_checkpoint(args.critic, "critic")
    critic = tx.Critic2D.load(args.critic)
    if args.tsdf:
        grid = geo.load_tsdf(args.tsdf)
        vocab = dst.KEYWORD_VOCAB
    else:
        if args.dataset is None or args.sample_index is None:
            raise ValueError("texture needs either --tsdf or --dataset with --sample-index")
        ds = dst.load_dataset(args.dataset)
        grid = ds.test[args.sample_index].grid
        vocab = ds.vocab
    words = [w.strip() for w in args.keywords.split(",") if w.strip()]
    color = tx.texture_shape(grid, words, critic, steps=args.steps,
                             seed=args.seed, vocab=vocab, log=print)
    mesh = geo.marching_cubes(grid)
    colors = color.query(mesh.vertices)
    out = args.out if args.out.endswith(".obj") else args.out + ".obj"
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    geo.save_obj(mesh, out, vertex_colors=colors)
    print(f"wrote {out} with vertex colors")
    return 0


def _cmd_evaluate(args) -> int:
    vae, den, sched = _load_stack(args)
    ds = dst.load_dataset(args.dataset)
    chosen = ds.test[: args.n_shapes] if args.n_shapes else ds.test
    # completion protocol: the observed region is the bottom half
    testset = [dst.build_sample(s.spec, ds.resolution, ds.truncation,
                                partial_mode="bottom-half") for s in chosen]

    def completer(sample, seed):
        return df.blended_completion(den, sched, vae, sample.partial, sample.mask,
                                     cond.ConditionSet([]), seed=seed)

    report = mx.evaluate_completion(completer, testset, k=args.k,
                                    n_points=args.n_points, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "completion_report.json")
    with open(path, "w") as f:
        f.write(report.to_json())
    print(report.to_table())
    print(f"wrote {path}")
    return 0


def _cmd_serve(args) -> int:
    if not args.config:
        raise ValueError("serve requires --config")
    config = RunConfig.load(args.config)
    if args.port:
        config.port = args.port
    httpd, service = serve(config)
    print(f"serving on port {config.port} (queue capacity "
          f"{config.queue_capacity}, {config.workers} worker)")
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        service.stop()
        httpd.server_close()
    return 0


_COMMANDS = {
    "gen-dataset": _cmd_gen_dataset,
    "train-vqvae": _cmd_train_vqvae,
    "train-diffusion": _cmd_train_diffusion,
    "train-critic": _cmd_train_critic,
    "sample": _cmd_sample,
    "complete": _cmd_complete,
    "texture": _cmd_texture,
    "evaluate": _cmd_evaluate,
    "serve": _cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except SystemExit:
        raise
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
