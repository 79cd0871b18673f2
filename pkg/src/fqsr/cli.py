"""Command-line interface: ``fqsr {cost,sr,train,eval,hist}``."""

import argparse
import os
import sys

import numpy as np

from . import costmodel
from .errors import ConfigError, FQSRError
from .evalmetrics import bicubic_resize, evaluate, self_ensemble
from .io import (
    image_to_tensor,
    list_images,
    load_checkpoint,
    read_image,
    save_checkpoint,
    tensor_to_image,
    write_csv,
    write_image,
)
from .netgraph import MODES, build_model, effective_conv, forward, init_weights, run
from .quantizer import quantize
from .trainer import (
    TrainConfig,
    Trainer,
    default_lr,
    parse_config_text,
    prepare_pairs,
    sample_batch,
    total_iterations,
)

HIST_BINS = 256


def _fmt(x):
    return f"{x:.3f}"


def cmd_cost(args):
    spec = build_model(args.arch, args.scale, (args.wt, args.fm, args.sc), args.blocks, args.channels)
    report = costmodel.cost_report(spec, (args.height, args.width), style=args.style)
    print(f"arch={args.arch} scale=x{args.scale} bits={spec.bitcfg} input={args.width}x{args.height} style={args.style}")
    print(f"FLOPs {_fmt(report.total_flops)} G")
    print(f"OPs {_fmt(report.total_ops)} G")
    print(f"Memo {_fmt(report.peak_memory_mb)} MB ({report.buffers} buffers)")
    rows = [(c.layer, c.module, c.multiplies, _fmt(c.gflops), c.precision, f"{c.gops:.6f}")
            for c in report.per_layer]
    header = ("layer", "module", "multiplies", "gflops", "precision", "gops")
    if args.csv:
        write_csv(args.csv, header, rows)
    else:
        write_csv(sys.stdout, header, rows)
    return 0


def _model_fn(ckpt, mode):
    return lambda x: forward(ckpt.spec, ckpt.weights, x, mode)


def cmd_sr(args):
    ckpt = load_checkpoint(args.ckpt)
    lr = image_to_tensor(read_image(args.input))
    fn = _model_fn(ckpt, args.mode)
    out = self_ensemble(fn, lr) if args.ensemble else fn(lr)
    write_image(args.output, tensor_to_image(out))
    return 0


def load_train_config(path, overrides=()):
    values = parse_config_text(open(path).read()) if path else {}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = value.strip()
    if "FQSR_SEED" in os.environ:
        values["seed"] = os.environ["FQSR_SEED"]
    if "lr0" not in values:
        values["lr0"] = str(default_lr(values.get("arch", "srresnet")))
    return TrainConfig.from_mapping(values)


def _hr_dir(data_dir):
    sub = os.path.join(data_dir, "HR")
    return sub if os.path.isdir(sub) else data_dir


def cmd_train(args):
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if ckpt.cfg is None or ckpt.opt is None:
            raise ConfigError(f"{args.resume} carries no training state")
        cfg, spec, weights, opt = ckpt.cfg, ckpt.spec, ckpt.weights, ckpt.opt
    else:
        cfg = load_train_config(args.config, args.set)
        spec = build_model(cfg.arch, cfg.scale, cfg.bitcfg, cfg.blocks, cfg.channels)
        weights = init_weights(spec, cfg.seed, cfg.warmup_l)
        opt = None
    files = list_images(_hr_dir(args.data))
    if not files:
        raise ConfigError(f"no training images in {args.data}")
    pairs = prepare_pairs([read_image(f) for f in files], cfg.scale)
    total = total_iterations(cfg, len(files))
    per_epoch = total // cfg.epochs
    trainer = Trainer(spec, weights, cfg, total, opt)
    stop = total if args.steps is None else min(total, trainer.iteration + args.steps)

    log = open(args.log, "a" if args.resume else "w", newline="") if args.log else None
    try:
        if log and not args.resume:
            log.write("iteration,loss_total,loss_sr,loss_sqcl,lr\n")
        while trainer.iteration < stop:
            it = trainer.iteration
            r = trainer.step(*sample_batch(pairs, cfg, it))
            line = f"{r.iteration},{r.loss_total!r},{r.loss_sr!r},{r.loss_sqcl!r},{r.lr!r}"
            if log:
                log.write(line + "\n")
            if not args.quiet:
                print(line)
            if trainer.iteration % per_epoch == 0:
                save_checkpoint(args.out, spec, weights, trainer.opt, cfg)
    finally:
        if log:
            log.close()
    save_checkpoint(args.out, spec, weights, trainer.opt, cfg)
    return 0


def _eval_pairs(data_dir, scale):
    """Yield (name, lr uint8, hr uint8) from ``HR/`` + ``LR/`` or from bare HR images."""
    lr_dir = os.path.join(data_dir, "LR")
    hr_dir = _hr_dir(data_dir)
    for path in list_images(hr_dir):
        name = os.path.basename(path)
        hr = read_image(path)
        h, w = (hr.shape[0] // scale) * scale, (hr.shape[1] // scale) * scale
        hr = hr[:h, :w]
        lr_path = os.path.join(lr_dir, name)
        if os.path.isdir(lr_dir) and os.path.exists(lr_path):
            lr = read_image(lr_path)
        else:
            lr = tensor_to_image(np.clip(bicubic_resize(image_to_tensor(hr), 1.0 / scale), 0, 1))
        yield name, lr, hr


def _baseline_fn(kind, scale):
    if kind == "bicubic":
        return lambda x: np.clip(bicubic_resize(x, scale), 0.0, 1.0)
    return lambda x: np.repeat(np.repeat(x, scale, axis=2), scale, axis=3)


def cmd_eval(args):
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        scale = ckpt.spec.scale
        fn = _model_fn(ckpt, args.mode)
    else:
        if not args.scale:
            raise ConfigError("--scale is required with --baseline")
        scale = args.scale
        fn = _baseline_fn(args.baseline, scale)
    rows, summary = [], []
    for data_dir in args.data:
        dataset = os.path.basename(os.path.normpath(data_dir))
        results = []
        for name, lr, hr in _eval_pairs(data_dir, scale):
            x = image_to_tensor(lr)
            sr = tensor_to_image(self_ensemble(fn, x) if args.ensemble else fn(x))
            m = evaluate(sr, hr, shave=scale, y_channel=args.y_channel)
            results.append(m)
            rows.append((dataset, name, f"{m.psnr_db:.3f}", f"{m.ssim:.4f}"))
        if not results:
            raise ConfigError(f"no images in {data_dir}")
        psnr = float(np.mean([m.psnr_db for m in results]))
        ssim = float(np.mean([m.ssim for m in results]))
        summary.append((dataset, len(results), psnr, ssim))
        rows.append((dataset, "mean", f"{psnr:.3f}", f"{ssim:.4f}"))
    print(f"{'dataset':<16}{'images':>8}{'PSNR':>10}{'SSIM':>8}")
    for dataset, n, psnr, ssim in summary:
        print(f"{dataset:<16}{n:>8}{psnr:>10.3f}{ssim:>8.4f}")
    if args.csv:
        write_csv(args.csv, ("dataset", "image", "psnr", "ssim"), rows)
    return 0


def histogram_rows(before, after, bins=HIST_BINS):
    lo = float(min(before.min(), after.min()))
    hi = float(max(before.max(), after.max()))
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    cb, _ = np.histogram(before, edges)
    ca, _ = np.histogram(after, edges)
    return [(repr(float(edges[i])), repr(float(edges[i + 1])), int(cb[i]), int(ca[i])) for i in range(bins)]


def cmd_hist(args):
    ckpt = load_checkpoint(args.ckpt)
    spec, weights = ckpt.spec, ckpt.weights
    if not 0 <= args.layer < len(spec.layers):
        raise ConfigError(f"layer {args.layer} does not exist (model has {len(spec.layers)} layers)")
    layer = spec.layers[args.layer]
    sites = {q.role: q.id for q in spec.quantizers if q.layer == layer.id}
    if not sites:
        raise ConfigError(f"layer {layer.id} ({layer.kind}) has no quantizer")
    role = args.site or ("weight" if "weight" in sites else "output")
    if role not in sites:
        raise ConfigError(f"layer {layer.id} has no {role!r} quantizer; available: {', '.join(sites)}")
    qid = sites[role]
    if role == "weight":
        values = effective_conv(spec, weights, layer).weight
    else:
        if not args.input:
            raise ConfigError(f"--input image required for the {role!r} site")
        trace = run(spec, weights, image_to_tensor(read_image(args.input)), "fake_quant", keep=True)
        found = [v for q, v in trace.sites if q == qid]
        if not found:
            raise ConfigError(f"quantizer {qid} is full precision; nothing to histogram")
        values = found[0]
    after = quantize(values, weights.quant[qid])
    write_csv(args.out, ("bin_left", "bin_right", "count_before", "count_after"),
              histogram_rows(np.ravel(values), np.ravel(after)))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="fqsr", description="Fully quantized super-resolution engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cost", help="FLOPs / OPs / peak memory of a model")
    p.add_argument("--arch", default="srresnet")
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--wt", type=int, default=32)
    p.add_argument("--fm", type=int, default=32)
    p.add_argument("--sc", type=int, default=32)
    p.add_argument("--blocks", type=int, default=16)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--style", choices=("fqsr", "bam"), default="fqsr",
                   help="bam: binarized M with full-precision E/R and one buffer per M conv")
    p.add_argument("--csv", help="write the per-layer table here instead of stdout")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("sr", help="super-resolve one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--mode", choices=MODES, default="integer")
    p.add_argument("--ensemble", action="store_true")
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("train", help="fake-quantized training")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--steps", type=int, help="stop after this many steps in this run")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--log", help="append per-step losses to this CSV")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PSNR / SSIM over image directories")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--baseline", choices=("bicubic", "nearest"))
    p.add_argument("--scale", type=int)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--mode", choices=MODES, default="integer")
    p.add_argument("--ensemble", action="store_true")
    p.add_argument("--y-channel", action="store_true")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("hist", help="value histogram before/after one quantizer")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--site", choices=("weight", "input", "skip", "branch", "output"))
    p.add_argument("--input", help="image driving activation sites")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_hist)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FQSRError, OSError, ValueError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"fqsr {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
