"""Command-line entry point: generate, quantize, analyze, eval, bench."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from awqkit import checkpoint as ckpt
from awqkit.kernels import LinearLayerPacked, bench_kernel, traffic_breakdown
from awqkit.model import METHODS, TinyModel, capture_activations, layer_errors, quantize_model, relative_error, synthetic_inputs
from awqkit.packing import LAYOUTS, check_layout
from awqkit.quant import DEFAULT_CLIP_GRID, QuantConfig, quantize_group_rtn
from awqkit.salient import mixed_precision_eval, scale_salient_stats
from awqkit.synthetic import opt_like_layer, salient_layer

log = logging.getLogger("awqkit")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2

ANALYZE_FRACTIONS = (0.001, 0.01, 0.03)
ANALYZE_SCALES = (1.0, 1.25, 1.5, 2.0, 4.0)
HELDOUT_NAME = "inputs"


class UsageError(Exception):
    pass


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _pct(f: float) -> str:
    return f"{f * 100:g}%"


class Reporter:
    """Writes either aligned text or one JSON record per line."""

    def __init__(self, fmt: str, stream=None):
        self.fmt = fmt
        self.stream = stream or sys.stdout

    def text(self, line: str = "") -> None:
        if self.fmt == "text":
            print(line, file=self.stream)

    def record(self, rec: dict) -> None:
        if self.fmt == "structured":
            print(json.dumps(rec, sort_keys=True), file=self.stream)


def build_config(args) -> QuantConfig:
    try:
        cfg = QuantConfig(bits=args.bits, group_size=args.group_size, mode=args.mode,
                          clip_grid=args.clip_grid, alpha_grid_size=args.alpha_grid)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    layout = getattr(args, "layout", None)
    if layout is not None:
        try:
            check_layout(cfg.bits, layout)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    return cfg


def _require(path, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: no such file {p}")
    return p


# --- subcommands ------------------------------------------------------------


def cmd_generate(args, rep: Reporter) -> int:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    model = TinyModel.random(dim=args.dim, n_blocks=args.blocks, seed=args.seed)
    calib_x = synthetic_inputs(args.calib_seqs * args.seq_len, args.dim, seed=args.seed + 1)
    held_x = synthetic_inputs(args.tokens, args.dim, seed=args.seed + 2)
    ckpt.save_model(out / "model.awqk", model)
    ckpt.save_activations(out / "calib.awqk", capture_activations(model, calib_x),
                          {"sequences": args.calib_seqs, "seq_len": args.seq_len})
    ckpt.save_activations(out / "heldout.awqk", {HELDOUT_NAME: held_x})
    rep.text(f"wrote {out / 'model.awqk'}, {out / 'calib.awqk'}, {out / 'heldout.awqk'}")
    rep.record({"type": "generate", "dir": str(out), "dim": args.dim, "blocks": args.blocks,
                "calib_tokens": int(calib_x.shape[0]), "heldout_tokens": args.tokens})
    return EXIT_OK


def cmd_quantize(args, rep: Reporter) -> int:
    cfg = build_config(args)
    model_path = _require(args.model, "--model")
    calib_path = _require(args.calib, "--calib")
    if args.out is None:
        raise UsageError("--out is required")
    model = ckpt.load_model(model_path)
    calib = ckpt.load_calibration(calib_path, model)
    qmodel, reports = quantize_model(model, calib, cfg, method=args.method, layout=args.layout)
    meta = {"quant": {"bits": cfg.bits, "group_size": cfg.group_size, "mode": cfg.mode, "layout": args.layout}}
    if args.method == "mixed-fp16":
        meta["quant"]["simulated"] = True
    size = ckpt.save_model(args.out, qmodel, meta)
    fp_size = len(ckpt.encode(ckpt.model_to_file(model)))

    rep.text(f"{'layer':<16} {'rtn_loss':>12} {args.method + '_loss':>12} {'alpha':>7} {'clip':>6}")
    for r in reports:
        rep.text(f"{r.name:<16} {r.rtn_loss:>12.5g} {r.loss:>12.5g} {r.alpha:>7.3f} {r.mean_clip_ratio:>6.3f}")
        rep.record({"type": "layer", **r.to_record()})
    rep.text(f"compression ratio {fp_size / size:.3f}x ({fp_size} -> {size} bytes)")
    rep.record({"type": "summary", "fp_bytes": fp_size, "quantized_bytes": size,
                "compression_ratio": fp_size / size, "out": str(args.out)})
    return EXIT_OK


def _analyze_layer(name, w, x, cfg, seed, rep: Reporter) -> None:
    rep.text(f"[{name}] protection error / RTN error")
    rep.text(f"  {'criterion':<11}" + "".join(f"{_pct(f):>9}" for f in ANALYZE_FRACTIONS))
    for criterion in ("activation", "weight", "random"):
        cells = []
        for f in ANALYZE_FRACTIONS:
            r = mixed_precision_eval(w, x, cfg, criterion, f, seed=seed)
            rel = r.layer_error_protected / r.layer_error_rtn if r.layer_error_rtn > 0 else 0.0
            cells.append(f"{rel:>9.4f}" + ("*" if r.degenerate else ""))
            rep.record({"type": "saliency", "layer": name, **r.to_record()})
        rep.text(f"  {criterion:<11}" + "".join(cells))
    rep.text(f"[{name}] scaling 1% salient channels")
    rep.text(f"  {'statistic':<26}" + "".join(f"{'s=' + format(s, 'g'):>9}" for s in ANALYZE_SCALES))
    stats = [scale_salient_stats(w, x, cfg, 0.01, s) for s in ANALYZE_SCALES]
    rows = [
        ("delta changed (all)", "frac_delta_changed"),
        ("delta changed (salient)", "frac_delta_changed_salient"),
        ("mean delta'/delta", "mean_delta_ratio"),
        ("mean delta'/delta / s", "mean_error_ratio"),
        ("layer error", "layer_error"),
    ]
    for label, key in rows:
        rep.text(f"  {label:<26}" + "".join(f"{getattr(st, key):>9.4g}" for st in stats))
    for st in stats:
        rec = st.to_record()
        rec.pop("salient_channel_ids")
        rep.record({"type": "scale_stats", "layer": name, **rec})


def cmd_analyze(args, rep: Reporter) -> int:
    cfg = build_config(args)
    if args.synthetic:
        if args.synthetic == "salient":
            w, x, _ = salient_layer(seed=args.seed)
        else:
            w, x = opt_like_layer(seed=args.seed)
        _analyze_layer(f"synthetic.{args.synthetic}", w, x, cfg, args.seed, rep)
        return EXIT_OK
    model = ckpt.load_model(_require(args.model, "--model"))
    calib = ckpt.load_calibration(_require(args.calib, "--calib"), model)
    for name in model.names:
        w = model.layers[name]
        if isinstance(w, LinearLayerPacked):
            raise UsageError(f"--model must be a full-precision model; {name} is quantized")
        _analyze_layer(name, w, calib[name], cfg, args.seed, rep)
    return EXIT_OK


def cmd_eval(args, rep: Reporter) -> int:
    fp = ckpt.load_model(_require(args.model, "--model"))
    qm = ckpt.load_model(_require(args.quantized, "--quantized"))
    if (qm.dim, qm.hidden, qm.n_blocks) != (fp.dim, fp.hidden, fp.n_blocks):
        raise UsageError("--model and --quantized have different architectures")
    if args.inputs:
        acts = ckpt.load_activations(args.inputs)
        if HELDOUT_NAME not in acts:
            raise ckpt.CalibrationError(f"{args.inputs}: no {HELDOUT_NAME!r} tensor")
        x = acts[HELDOUT_NAME]
    else:
        x = synthetic_inputs(args.tokens, fp.dim, seed=args.seed)
    total = relative_error(qm.forward(x), fp.forward(x))
    held = layer_errors(fp, qm, x)
    calib_err = {}
    if args.calib:
        calib = ckpt.load_calibration(args.calib, fp)
        calib_err = {n: relative_error(qm.linear(n, calib[n]), fp.linear(n, calib[n])) for n in fp.names}

    rep.text(f"model relative output error {total:.6g} on {x.shape[0]} held-out tokens")
    rep.text(f"{'layer':<16} {'heldout':>10}" + (f" {'calib':>10}" if calib_err else ""))
    for n in fp.names:
        rep.text(f"{n:<16} {held[n]:>10.5g}" + (f" {calib_err[n]:>10.5g}" if calib_err else ""))
        rec = {"type": "layer_error", "layer": n, "heldout_rel_error": held[n]}
        if calib_err:
            rec["calib_rel_error"] = calib_err[n]
        rep.record(rec)
    rep.record({"type": "model_error", "rel_error": total, "tokens": int(x.shape[0])})
    return EXIT_OK


def cmd_bench(args, rep: Reporter) -> int:
    cfg = build_config(args)
    layouts = [args.layout] if args.layout else [l for l in LAYOUTS if _layout_ok(cfg.bits, l)]
    rng = np.random.default_rng(args.seed)
    rep.text(f"{'size':>11} {'layout':>8} {'tokens':>6} {'median_ms':>10} {'base_ms':>9} {'speedup':>8} "
             f"{'GB/s':>7} {'AI':>6} {'x_fp32':>7} {'x_fp16':>7}")
    for size in args.sizes:
        w = rng.standard_normal((size, size)).astype(np.float32)
        gq = quantize_group_rtn(w, cfg)
        for layout in layouts:
            layer = LinearLayerPacked.from_group_quant(gq, layout=layout)
            br = bench_kernel(layer, tokens=args.tokens, repeats=args.repeats, seed=args.seed)
            flag = "" if br.meets_speedup_target else "  (below 1.2x target)"
            rep.text(f"{size:>5}x{size:<5} {layout:>8} {br.tokens:>6} {br.median_s * 1e3:>10.3f} "
                     f"{br.baseline_median_s * 1e3:>9.3f} {br.speedup_vs_baseline:>7.2f}x "
                     f"{br.achieved_gbps:>7.2f} {br.arithmetic_intensity:>6.2f} {br.reduction_vs_fp32:>7.3f} "
                     f"{br.reduction_vs_fp16:>7.3f}{flag}")
            rep.record({"type": "bench", **br.to_record()})
    rep.text()
    rep.text(f"{'size':>11} {'tokens':>6} {'weight_B':>12} {'activation_B':>13} {'ratio':>9}")
    for size in args.sizes:
        tb = traffic_breakdown(size, size, args.tokens, cfg.bits, cfg.group_size)
        rep.text(f"{size:>5}x{size:<5} {args.tokens:>6} {tb['weight_bytes']:>12} {tb['activation_bytes']:>13} "
                 f"{tb['weight_to_activation']:>9.1f}")
        rep.record({"type": "traffic", **tb})
    return EXIT_OK


def _layout_ok(bits: int, layout: str) -> bool:
    try:
        check_layout(bits, layout)
    except ValueError:
        return False
    return True


# --- parser -----------------------------------------------------------------


def _add_quant_flags(p, bits: int) -> None:
    p.add_argument("--bits", type=int, default=bits, help=f"weight bit width (default {bits})")
    p.add_argument("--group-size", type=int, default=128)
    p.add_argument("--mode", choices=("symmetric", "asymmetric"), default="symmetric")
    p.add_argument("--alpha-grid", type=int, default=20, help="number of alpha grid points in [0, 1]")
    p.add_argument("--clip-grid", type=_float_list, default=DEFAULT_CLIP_GRID,
                   help="comma-separated max-shrink ratios in (0, 1]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="awqkit", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--report", choices=("text", "structured"), default="text")

    p = sub.add_parser("generate", help="write a synthetic model, calibration set and held-out inputs")
    common(p)
    p.add_argument("--out", help="output directory (default: current directory)")
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--calib-seqs", type=int, default=16)
    p.add_argument("--seq-len", type=int, default=32)
    p.add_argument("--tokens", type=int, default=256, help="held-out tokens")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("quantize", help="quantize a model and write a packed checkpoint")
    common(p)
    _add_quant_flags(p, 4)
    p.add_argument("--model")
    p.add_argument("--calib")
    p.add_argument("--method", choices=METHODS, default="awq")
    p.add_argument("--layout", choices=LAYOUTS, default="linear")
    p.add_argument("--out")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("analyze", help="channel-protection and salient-scaling analyses")
    common(p)
    _add_quant_flags(p, 3)
    p.add_argument("--model")
    p.add_argument("--calib")
    p.add_argument("--synthetic", choices=("salient", "opt"), help="analyze a generated layer instead of a model")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("eval", help="compare a quantized checkpoint with its full-precision model")
    common(p)
    p.add_argument("--model")
    p.add_argument("--quantized")
    p.add_argument("--inputs", help="activation file with an 'inputs' tensor (default: synthetic)")
    p.add_argument("--calib", help="also report per-layer error on these calibration activations")
    p.add_argument("--tokens", type=int, default=256)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="fused kernel micro-benchmarks and traffic accounting")
    common(p)
    _add_quant_flags(p, 4)
    p.add_argument("--layout", choices=LAYOUTS, default=None, help="default: every layout valid for --bits")
    p.add_argument("--sizes", type=_int_list, default=(1024, 4096))
    p.add_argument("--tokens", type=int, default=1)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    rep = Reporter(args.report)
    try:
        return args.func(args, rep)
    except UsageError as exc:
        print(f"awqkit {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ckpt.CheckpointError as exc:
        print(f"awqkit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, KeyError, OSError) as exc:
        print(f"awqkit {args.command}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
