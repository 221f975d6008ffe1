"""Command-line surface.

Subcommands:
    synth    one content/style pair -> one image + manifest record
    batch    a labeled content tree x style pool -> a generated dataset
    metrics  per-layer covariance discrepancy between two image sets
    sweep    one pair swept over several trade-off values
    rf       receptive-field table for the network preset

Exit codes: 0 success, 1 usage error, 2 I/O or data error, 3 numeric
divergence. Every subcommand is deterministic under a fixed seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dataio import (
    ManifestError,
    ManifestRecord,
    ManifestWriter,
    PreprocSpec,
    deprocess,
    load_image,
    preprocess,
    read_manifest,
    save_image,
    write_manifest,
)
from .losses import LossConfig, covariance
from .net import NetworkSpec, forward, receptive_field, vgg16
from .synthesis import DivergenceError, SynthesisConfig, sweep_lambda, synthesize
from .weights import WeightFormatError, load_weights, random_weights

__all__ = ["main"]

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp"}
DEFAULT_FEAT = "conv3_2:1"
DEFAULT_CORAL = "conv1_1:0.2,conv2_1:0.2,conv3_1:0.2,conv4_1:0.2,conv5_1:0.2"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits on error by default; route through the exit-code map
    def error(self, message):
        raise UsageError(message)


def _layer_weight_map(text: str) -> dict[str, float]:
    """Parse "name:weight,name:weight" (weight defaults to 1). "" -> {}."""
    out: dict[str, float] = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        name, sep, w = part.partition(":")
        name = name.strip()
        if not name:
            raise ValueError(f"bad layer entry {part!r}")
        out[name] = float(w) if sep else 1.0
    return out


def _name_list(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def _float_list(text: str) -> list[float]:
    return [float(p) for p in text.split(",") if p.strip()]


def _add_weight_flags(p: argparse.ArgumentParser):
    p.add_argument("--weights", help="path to a weight container file")
    p.add_argument(
        "--random-weights",
        type=int,
        metavar="SEED",
        help="use seeded random weights instead of a weight file",
    )


def _add_loss_flags(p: argparse.ArgumentParser):
    p.add_argument(
        "--feat-layers",
        type=_layer_weight_map,
        default=_layer_weight_map(DEFAULT_FEAT),
        metavar="NAME:W,...",
        help=f"feature-loss layers and weights (default {DEFAULT_FEAT})",
    )
    p.add_argument(
        "--coral-layers",
        type=_layer_weight_map,
        default=_layer_weight_map(DEFAULT_CORAL),
        metavar="NAME:W,...",
        help="covariance-loss layers and weights "
        "(default conv1_1..conv5_1 at 0.2)",
    )
    p.add_argument("--lambda", dest="lam", type=float, default=1e3,
                   help="covariance-loss trade-off weight (default 1000)")
    p.add_argument("--cov-normalizer", choices=("channels", "samples"),
                   default="channels")


def _add_synth_flags(p: argparse.ArgumentParser):
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--noise-sigma", type=float, default=10.0,
                   help="std of the Gaussian init perturbation, pixel scale")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--optimizer", choices=("adam", "gd"), default="adam")
    p.add_argument("--step", type=float, default=1.0)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--clamp", type=float, nargs=2, metavar=("LO", "HI"),
                   default=None, help="clamp the final iterate to this range")
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coralsynth", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize one image")
    _add_weight_flags(p)
    _add_loss_flags(p)
    _add_synth_flags(p)
    p.add_argument("--content", required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", help="manifest to append (default: next to --out)")
    p.add_argument("--label", default="")
    p.add_argument("--trace", help="write per-iteration losses to this file")
    p.set_defaults(run=cmd_synth)

    p = sub.add_parser("batch", help="generate a labeled dataset")
    _add_weight_flags(p)
    _add_loss_flags(p)
    _add_synth_flags(p)
    p.add_argument("--content-dir", required=True,
                   help="directory with one subdirectory per label")
    p.add_argument("--style-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--manifest", help="default: <out-dir>/manifest.jsonl")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(run=cmd_batch)

    p = sub.add_parser("metrics", help="covariance discrepancy between two sets")
    _add_weight_flags(p)
    p.add_argument("--set-a", required=True)
    p.add_argument("--set-b", required=True)
    p.add_argument("--layers", type=_name_list,
                   default=_name_list("conv1_1,conv2_1,conv3_1,conv4_1,conv5_1"))
    p.add_argument("--mode", choices=("pairwise", "mean-cov"), default="pairwise",
                   help="mean of per-pair distances, or distance of mean covariances")
    p.add_argument("--cov-normalizer", choices=("channels", "samples"),
                   default="channels")
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.set_defaults(run=cmd_metrics)

    p = sub.add_parser("sweep", help="sweep the trade-off weight on one pair")
    _add_weight_flags(p)
    _add_loss_flags(p)
    _add_synth_flags(p)
    p.add_argument("--content", required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--lambdas", type=_float_list, required=True, metavar="L1,L2,...")
    p.add_argument("--report", help="default: <out-dir>/sweep.jsonl")
    p.set_defaults(run=cmd_sweep)

    p = sub.add_parser("rf", help="receptive-field table")
    _add_weight_flags(p)
    p.add_argument("--layers", type=_name_list, default=None,
                   help="restrict the table to these layers")
    p.set_defaults(run=cmd_rf)

    return parser


def _load_net(args) -> tuple[NetworkSpec, PreprocSpec]:
    if args.weights and args.random_weights is not None:
        raise UsageError("--weights and --random-weights are mutually exclusive")
    if args.weights:
        net = load_weights(args.weights, vgg16())
    elif args.random_weights is not None:
        net = random_weights(vgg16(), seed=args.random_weights)
    else:
        raise UsageError("one of --weights or --random-weights is required")
    means = net.preproc_means if net.preproc_means is not None else (0.0, 0.0, 0.0)
    return net, PreprocSpec(channel_means=means)


def _check_loss_layers(net: NetworkSpec, names) -> None:
    for name in names:
        try:
            idx = net.layer_index(name)
        except KeyError:
            raise UsageError(f"unknown layer {name!r}") from None
        if net.layers[idx].kind != "conv":
            raise UsageError(f"layer {name!r} is not a conv layer")


def _loss_config(args, net: NetworkSpec) -> LossConfig:
    _check_loss_layers(net, list(args.feat_layers) + list(args.coral_layers))
    try:
        return LossConfig(
            feat_layers=dict(args.feat_layers),
            coral_layers=dict(args.coral_layers),
            lam=args.lam,
            cov_normalizer=args.cov_normalizer,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None


def _synth_config(args, loss_cfg: LossConfig) -> SynthesisConfig:
    try:
        return SynthesisConfig(
            loss=loss_cfg,
            sigma=args.noise_sigma,
            seed=args.seed,
            optimizer=args.optimizer,
            step=args.step,
            beta1=args.beta1,
            beta2=args.beta2,
            iterations=args.iterations,
            clamp=tuple(args.clamp) if args.clamp is not None else None,
            log_every=args.log_every,
            precision=args.precision,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None


def _write_trace(trace, path):
    with open(path, "w") as f:
        for p in trace.points:
            f.write(json.dumps(
                {"iter": p.iteration, "feat": p.feat, "coral": p.coral,
                 "total": p.total}) + "\n")


def _record_for(out_path, content_path, style_path, label, loss_cfg, cfg, trace):
    return ManifestRecord(
        output_path=str(out_path),
        content_path=str(content_path),
        style_path=str(style_path),
        label=label,
        lam=loss_cfg.lam,
        seed=cfg.seed,
        iterations=cfg.iterations,
        final_feat=trace.final.feat,
        final_coral=trace.final.coral,
        feat_layers=dict(sorted(loss_cfg.feat_layers.items())),
        coral_layers=dict(sorted(loss_cfg.coral_layers.items())),
    )


def cmd_synth(args) -> int:
    net, pre = _load_net(args)
    loss_cfg = _loss_config(args, net)
    cfg = _synth_config(args, loss_cfg)
    content = preprocess(load_image(args.content), pre)
    style = preprocess(load_image(args.style), pre)
    image, trace = synthesize(content, style, net, cfg)

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_image(deprocess(image, pre), out_path)
    manifest = Path(args.manifest) if args.manifest else out_path.parent / "manifest.jsonl"
    ManifestWriter(manifest).append(
        _record_for(out_path, args.content, args.style, args.label, loss_cfg, cfg, trace)
    )
    if args.trace:
        _write_trace(trace, args.trace)
    final = trace.final
    print(f"feat={final.feat:.6g} coral={final.coral:.6g} total={final.total:.6g}")
    return 0


def _image_files(root: Path, recursive: bool) -> list[Path]:
    it = root.rglob("*") if recursive else root.glob("*")
    return sorted(p for p in it if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)


def cmd_batch(args) -> int:
    net, pre = _load_net(args)
    loss_cfg = _loss_config(args, net)
    base_cfg = _synth_config(args, loss_cfg)
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")

    content_dir = Path(args.content_dir)
    style_dir = Path(args.style_dir)
    out_dir = Path(args.out_dir)
    contents = _image_files(content_dir, recursive=True)
    styles = _image_files(style_dir, recursive=True)
    if not contents:
        raise ValueError(f"no images under content directory {content_dir}")
    if not styles:
        raise ValueError(f"no images under style directory {style_dir}")

    # pairing and per-item seeds depend only on the sorted full listing, so
    # a resumed run reproduces exactly the pairs of the original run
    rng = np.random.default_rng(base_cfg.seed)
    pair_idx = rng.integers(0, len(styles), size=len(contents))
    jobs = []
    for i, content_path in enumerate(contents):
        rel = content_path.relative_to(content_dir)
        label = rel.parts[0] if len(rel.parts) > 1 else ""
        jobs.append({
            "content": content_path,
            "style": styles[int(pair_idx[i])],
            "out": out_dir / rel.with_suffix(".png"),
            "label": label,
            "seed": base_cfg.seed + i,
        })

    manifest = Path(args.manifest) if args.manifest else out_dir / "manifest.jsonl"
    planned = {str(j["out"]) for j in jobs}
    done: dict[str, ManifestRecord] = {}
    if manifest.exists():
        for rec in read_manifest(manifest):
            if rec.output_path in planned and Path(rec.output_path).exists():
                done[rec.output_path] = rec
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(list(done.values()), manifest)
    writer = ManifestWriter(manifest)

    todo = [j for j in jobs if str(j["out"]) not in done]
    failures: list[tuple[Path, Exception]] = []

    def run_one(job):
        content = preprocess(load_image(job["content"]), pre)
        style = preprocess(load_image(job["style"]), pre)
        cfg = replace(base_cfg, seed=job["seed"])
        image, trace = synthesize(content, style, net, cfg)
        job["out"].parent.mkdir(parents=True, exist_ok=True)
        save_image(deprocess(image, pre), job["out"])
        writer.append(_record_for(job["out"], job["content"], job["style"],
                                  job["label"], loss_cfg, cfg, trace))

    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        futures = {pool.submit(run_one, job): job for job in todo}
        for future, job in futures.items():
            try:
                future.result()
            except Exception as e:  # noqa: BLE001 - keep the batch going
                failures.append((job["content"], e))
                print(f"failed {job['content']}: {e}", file=sys.stderr)

    print(f"generated {len(todo) - len(failures)}, "
          f"skipped {len(done)}, failed {len(failures)}")
    if any(isinstance(e, DivergenceError) for _, e in failures):
        return 3
    if failures:
        return 2
    return 0


def cmd_metrics(args) -> int:
    net, pre = _load_net(args)
    _check_loss_layers(net, args.layers)
    if not args.layers:
        raise UsageError("--layers must name at least one layer")
    layers = sorted(set(args.layers), key=net.layer_index)
    deepest = layers[-1]

    files_a = _image_files(Path(args.set_a), recursive=True)
    files_b = _image_files(Path(args.set_b), recursive=True)
    if not files_a or not files_b:
        raise ValueError("both image sets must be nonempty")
    if args.mode == "pairwise" and len(files_a) != len(files_b):
        raise ValueError(
            f"pairwise mode needs equal set sizes, got {len(files_a)} and {len(files_b)}"
        )

    def covs(path) -> dict[str, np.ndarray]:
        image = preprocess(load_image(path), pre)
        cache = forward(net, image, deepest, args.precision)
        return {l: covariance(cache.get(l), args.cov_normalizer) for l in layers}

    covs_a = [covs(p) for p in files_a]
    covs_b = [covs(p) for p in files_b]

    lines = []
    for layer in layers:
        if args.mode == "pairwise":
            dists = [
                float(np.sum((a[layer] - b[layer]) ** 2))
                for a, b in zip(covs_a, covs_b)
            ]
            distance, n_pairs = float(np.mean(dists)), len(dists)
        else:
            mean_a = np.mean([c[layer] for c in covs_a], axis=0)
            mean_b = np.mean([c[layer] for c in covs_b], axis=0)
            distance, n_pairs = float(np.sum((mean_a - mean_b) ** 2)), 1
        lines.append(json.dumps(
            {"layer": layer, "distance": distance, "n_pairs": n_pairs}))

    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_sweep(args) -> int:
    net, pre = _load_net(args)
    loss_cfg = _loss_config(args, net)
    cfg = _synth_config(args, loss_cfg)
    if not args.lambdas:
        raise UsageError("--lambdas must list at least one value")
    if any(lam < 0 for lam in args.lambdas):
        raise UsageError("lambda values must be nonnegative")

    content = preprocess(load_image(args.content), pre)
    style = preprocess(load_image(args.style), pre)
    results = sweep_lambda(content, style, net, cfg, args.lambdas)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = Path(args.report) if args.report else out_dir / "sweep.jsonl"
    with open(report_path, "w") as f:
        for res in results:
            out_path = out_dir / f"lambda_{res.lam:g}.png"
            save_image(deprocess(res.image, pre), out_path)
            f.write(json.dumps({
                "lambda": res.lam, "feat": res.feat, "coral": res.coral,
                "output_path": str(out_path)}) + "\n")
            print(f"lambda={res.lam:g} feat={res.feat:.6g} coral={res.coral:.6g}")
    return 0


def cmd_rf(args) -> int:
    if args.weights or args.random_weights is not None:
        net, _ = _load_net(args)
    else:
        net = vgg16()
    names = [l.name for l in net.conv_layers()]
    if args.layers is not None:
        _check_loss_layers(net, args.layers)
        names = [n for n in names if n in set(args.layers)]
    width = max(len(n) for n in names) if names else 0
    for name in names:
        print(f"{name:<{width}}  {receptive_field(net, name)}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        return args.run(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (OSError, ManifestError, WeightFormatError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
