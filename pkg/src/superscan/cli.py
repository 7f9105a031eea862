"""Command-line entry point: ``superscan <command> [options]``.

Exit codes: 0 success, 1 contract failure (bad file, failed check), 2 usage error.
"""
from __future__ import annotations

import argparse
import math
import sys

import numpy as np

from . import io as sio


class ContractError(Exception):
    pass


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _emit_csv(text: str, path) -> None:
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# -- commands ---------------------------------------------------------------------

def cmd_sr(args) -> int:
    from .model import Model, build, forward, preset, self_ensemble
    cfg = preset(args.preset, args.scale)
    tree = sio.load_weights(args.weights)
    _, ref = build(cfg, 0)
    missing = sorted(set(ref) - set(tree))
    extra = sorted(set(tree) - set(ref))
    if missing or extra:
        raise ContractError(f"weights do not match preset {args.preset} x{args.scale}: "
                            f"{len(missing)} missing, {len(extra)} unexpected"
                            + (f" (first missing: {missing[0]})" if missing else ""))
    for k in ref:
        if tree[k].shape != ref[k].shape:
            raise ContractError(f"weight {k!r} has shape {tree[k].shape}, expected {ref[k].shape}")
    model = Model(cfg, tree)
    dtype = next(iter(tree.values())).dtype if len(tree) else np.float32
    lr = sio.to_float(sio.png_read(args.inp), dtype)[None]
    sr = self_ensemble(lr, model) if args.self_ensemble else forward(lr, model, "infer")
    sio.png_write(args.out, sio.to_u8(np.asarray(sr)[0]))
    return 0


def cmd_superpixels(args) -> int:
    from .superpixel import label_map, sample
    img = sio.png_read(args.inp)
    feat = img.astype(np.float64) / 255.0
    dec = sample(feat, args.m, args.t)
    labels = label_map(dec)
    edge = np.zeros(labels.shape, dtype=bool)
    edge[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    edge[1:, :] |= labels[1:, :] != labels[:-1, :]
    out = img.copy()
    out[edge] = (255, 0, 0)
    sio.png_write(args.out, out)
    return 0


def cmd_train_toy(args) -> int:
    from .metrics import bicubic_resize
    from .model import build, preset
    from .train import NonFiniteLoss, train_toy, write_trace, write_usage
    hr = sio.png_read(args.hr).astype(np.float64) / 255.0
    r = args.scale
    H, W = hr.shape[0] - hr.shape[0] % r, hr.shape[1] - hr.shape[1] % r
    hr = hr[:H, :W]
    lr = np.clip(bicubic_resize(hr, r), 0.0, 1.0)
    model, _ = build(preset(args.preset, r), args.seed)
    try:
        res = train_toy(model, (lr.transpose(2, 0, 1), hr.transpose(2, 0, 1)), args.steps,
                        args.lr, args.seed, args.lam_freq)
    except NonFiniteLoss as exc:
        if args.trace:
            write_trace(args.trace, exc.trace)
        raise ContractError(str(exc)) from exc
    if args.trace:
        write_trace(args.trace, res.trace)
    if args.usage:
        write_usage(args.usage, res.usage)
    if args.weights_out:
        sio.save_weights(model.weights, args.weights_out)
    if res.trace:
        print(f"initial loss {res.trace[0]:.6f}  final loss {res.trace[-1]:.6f}  "
              f"ratio {res.trace[-1] / res.trace[0]:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from . import certify
    groups = [args.module] if args.module else None
    if args.module and args.module not in certify.GROUPS:
        print(f"unknown module {args.module!r}; choose from {', '.join(certify.GROUPS)}",
              file=sys.stderr)
        return 2
    failed = []

    def show(res):
        status = "ok" if res.ok else "FAIL"
        print(f"{res.name:48s} {res.report.max_rel_error:.3e}  {status}", flush=True)
        if not res.ok:
            failed.append(res.name)
    results = certify.run(groups, on_result=show)
    print(f"{len(results) - len(failed)}/{len(results)} checks within {certify.TOL:g}")
    return 1 if failed else 0


def cmd_bench_scan(args) -> int:
    from .bench import bench_scan
    rep = bench_scan(args.lengths, args.d_state, args.channels, args.trials,
                     threads=args.threads)
    _emit_csv(rep.to_csv(), args.out)
    if args.plot:
        rep.plot(args.plot)
    return 0


def cmd_bench_spssm(args) -> int:
    from .bench import bench_spssm
    rep = bench_spssm(args.h, args.w, args.s, args.m, args.trials, C=args.channels)
    _emit_csv(rep.to_csv(), args.out)
    return 0


def cmd_metrics(args) -> int:
    from .metrics import evaluate
    a, b = sio.png_read(args.a), sio.png_read(args.b)
    if a.shape != b.shape:
        raise ContractError(f"image sizes differ: {a.shape[:2]} vs {b.shape[:2]}")
    p, s = evaluate(a, b, args.scale)
    print("PSNR: inf dB" if math.isinf(p) else f"PSNR: {p:.2f} dB")
    print(f"SSIM: {s:.4f}")
    return 0


def cmd_params(args) -> int:
    from .model import build, param_count, preset
    model, _ = build(preset(args.preset, args.scale), 0)
    print(param_count(model))
    return 0


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="superscan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sr", help="super-resolve a PNG")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--scale", type=int, choices=(2, 3, 4), default=4)
    s.add_argument("--preset", default="T")
    s.add_argument("--out", required=True)
    s.add_argument("--self-ensemble", action="store_true")
    s.set_defaults(fn=cmd_sr)

    s = sub.add_parser("superpixels", help="draw superpixel boundaries over a PNG")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--m", type=int, default=64)
    s.add_argument("--t", type=int, default=5)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_superpixels)

    s = sub.add_parser("train-toy", help="overfit one HR image")
    s.add_argument("--hr", required=True)
    s.add_argument("--scale", type=int, choices=(2, 3, 4), default=2)
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--lr", type=float, default=2e-3)
    s.add_argument("--lam-freq", type=float, default=0.05)
    s.add_argument("--preset", default="T-mini")
    s.add_argument("--trace")
    s.add_argument("--usage", help="expert-usage CSV")
    s.add_argument("--weights-out")
    s.set_defaults(fn=cmd_train_toy)

    s = sub.add_parser("gradcheck", help="finite-difference gradient certification")
    s.add_argument("--module")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("bench-scan", help="scan timing vs sequence length (CSV)")
    s.add_argument("--lengths", type=_ints, default=[256, 1024, 4096, 16384])
    s.add_argument("--d-state", type=int, default=16)
    s.add_argument("--channels", type=int, default=16)
    s.add_argument("--trials", type=int, default=9)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--out")
    s.add_argument("--plot")
    s.set_defaults(fn=cmd_bench_scan)

    s = sub.add_parser("bench-spssm", help="superpixel vs dense scan cost (CSV)")
    s.add_argument("--h", type=int, default=64)
    s.add_argument("--w", type=int, default=64)
    s.add_argument("--s", type=int, default=1)
    s.add_argument("--m", type=int, default=64)
    s.add_argument("--channels", type=int, default=16)
    s.add_argument("--trials", type=int, default=9)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_bench_spssm)

    s = sub.add_parser("metrics", help="Y-channel PSNR/SSIM of two PNGs")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--scale", type=int, default=4, help="border crop in pixels")
    s.set_defaults(fn=cmd_metrics)

    s = sub.add_parser("params", help="exact parameter count of a preset")
    s.add_argument("--preset", default="T")
    s.add_argument("--scale", type=int, choices=(2, 3, 4), default=4)
    s.set_defaults(fn=cmd_params)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (ContractError, sio.FormatError, ValueError, IndexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
