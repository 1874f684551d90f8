"""Acceptance criteria, one test per criterion.

Every test appends a single PASS/FAIL line (with the measured value, the
pinned tolerance and the elapsed time) that is printed in the terminal
summary, then asserts.  Criterion 10 is hardware dependent and only reports.
"""

import time

import numpy as np
import pytest

from awqkit.cli import main
from awqkit.kernels import LinearLayerPacked, bench_kernel, gemm_fused, gemv_fused, reference_forward, weight_traffic_bytes
from awqkit.model import TinyModel, capture_activations, quantize_model, relative_error, synthetic_inputs
from awqkit.packing import LAYOUTS, pack, simd128_permutation, unpack
from awqkit.quant import (
    QuantConfig,
    expand_groups,
    fake_quantize,
    group_scales,
    quantize_group_rtn,
    round_half_away,
)
from awqkit.salient import collect_calib_stats, mixed_precision_eval, scale_salient_stats
from awqkit.search import search_scales
from awqkit.synthetic import opt_like_layer, salient_layer
from conftest import ACCEPTANCE_LINES
from oracles import brute_force_alpha, pack_scalar


class Criterion:
    def __init__(self, number, title, limit_s=None):
        self.number, self.title, self.limit_s = number, title, limit_s

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        return False

    def finish(self, ok, detail, soft=False):
        elapsed = time.perf_counter() - self.t0
        in_time = self.limit_s is None or elapsed < self.limit_s
        passed = ok and in_time
        if soft:
            status = "PASS" if ok else "MISS (soft, not gated)"
        else:
            status = "PASS" if passed else "FAIL"
        limit = f" / limit {self.limit_s:g}s" if self.limit_s else ""
        ACCEPTANCE_LINES.append(f"[{status}] C{self.number:<2} {self.title}: {detail} ({elapsed:.2f}s{limit})")
        if not soft:
            assert ok, detail
            assert in_time, f"took {elapsed:.2f}s, limit {self.limit_s}s"


@pytest.fixture(scope="module")
def tiny_model():
    fp = TinyModel.random(dim=256, n_blocks=4, seed=0)
    held = synthetic_inputs(512, 256, seed=100)
    return fp, held, fp.forward(held)


def test_c01_quantizer_bound():
    with Criterion(1, "|w_hat - w| <= delta/2 on in-range elements, INT2/3/4, G in {32,128,100}", 10) as c:
        rng = np.random.default_rng(1)
        worst = 0.0
        checked = clamped_nonmax = 0
        ok = True
        for bits in (2, 3, 4):
            for group in (32, 128, 100):
                w = (rng.standard_normal((100, 1000)) * rng.lognormal(0, 1, (100, 1))).astype(np.float32)
                cfg = QuantConfig(bits=bits, group_size=group)
                d = expand_groups(group_scales(w, cfg), group, w.shape[1])
                v = w / d
                in_range = (v >= cfg.qmin - 0.5) & (v <= cfg.qmax + 0.5)
                err = np.abs(fake_quantize(w, cfg) - w) / d
                ok &= bool(np.all(err[in_range] <= 0.5 * (1 + 1e-6)))
                # clamped elements must be the positive top of the group and stay within one step
                ok &= bool(np.all(w[~in_range] > 0) and np.all(err[~in_range] <= 1 + 1e-6))
                worst = max(worst, float(err[in_range].max()))
                checked += int(in_range.sum())
                gmax = expand_groups(np.maximum.reduceat(np.abs(w), np.arange(0, 1000, group), axis=1), group, 1000)
                clamped_nonmax += int(np.sum(~in_range & (np.abs(w) < gmax)))
        c.finish(ok and checked >= 100_000,
                 f"{checked} in-range elements, max err {worst:.6f} delta (tol 0.5); "
                 f"{clamped_nonmax} clamped non-max elements reported, not gated")


def test_c02_round_error_statistic():
    with Criterion(2, "mean |round(w/delta) - w/delta| in [0.23, 0.27]", 5) as c:
        rng = np.random.default_rng(2)
        w = rng.standard_normal((1024, 256)).astype(np.float32)
        cfg = QuantConfig(bits=4, group_size=128)
        v = w / expand_groups(group_scales(w, cfg), 128, 256)
        mean = float(np.mean(np.abs(round_half_away(v) - v)))
        c.finish(0.23 <= mean <= 0.27 and v.size >= 100_000, f"{mean:.4f} over {v.size} elements")


def test_c03_scaling_trend():
    with Criterion(3, "salient scaling sweep on 512x512 OPT-like layer", 30) as c:
        w, x = opt_like_layer(seed=0)
        cfg = QuantConfig(bits=3)
        scales = (1.0, 1.25, 1.5, 2.0, 4.0)
        st = [scale_salient_stats(w, x, cfg, 0.01, s) for s in scales]
        changed = [s.frac_delta_changed for s in st]
        ratio = [s.mean_error_ratio for s in st]
        err = [s.layer_error for s in st]
        inc = all(a < b for a, b in zip(changed, changed[1:]))
        dec = all(a > b for a, b in zip(ratio, ratio[1:])) and max(ratio) <= 1
        best = int(np.argmin(err))
        interior = 0 < best < len(scales) - 1
        c.finish(inc and dec and interior,
                 f"changed {[round(v, 4) for v in changed]}, ratio {[round(v, 3) for v in ratio]}, "
                 f"best s={scales[best]:g}")


def test_c04_saliency_criteria():
    with Criterion(4, "activation error <= 0.5 x min(weight, random) at 0.1%/1%/3%", 30) as c:
        w, x, _ = salient_layer(seed=0)
        cfg = QuantConfig(bits=3)
        ok, parts = True, []
        for f in (0.001, 0.01, 0.03):
            e = {k: mixed_precision_eval(w, x, cfg, k, f, seed=0).layer_error_protected
                 for k in ("activation", "weight", "random")}
            r = e["activation"] / min(e["weight"], e["random"])
            ok &= r <= 0.5
            parts.append(f"{f * 100:g}%: {r:.3f}")
        c.finish(ok, "ratio " + ", ".join(parts))


def test_c05_awq_beats_rtn(tiny_model):
    with Criterion(5, "TinyModel INT3-g128: every layer awq<=rtn, model error awq <= 0.9 x rtn", 120) as c:
        fp, held, ref = tiny_model
        calib = capture_activations(fp, synthetic_inputs(512, 256, seed=1))
        cfg = QuantConfig(bits=3, group_size=128)
        q_awq, reports = quantize_model(fp, calib, cfg, "awq")
        q_rtn, _ = quantize_model(fp, calib, cfg, "rtn")
        per_layer = all(r.loss <= r.rtn_loss for r in reports)
        e_awq = relative_error(q_awq.forward(held), ref)
        e_rtn = relative_error(q_rtn.forward(held), ref)
        c.finish(per_layer and e_awq <= 0.9 * e_rtn,
                 f"{sum(r.loss <= r.rtn_loss for r in reports)}/{len(reports)} layers; "
                 f"rel error awq {e_awq:.4f} vs rtn {e_rtn:.4f} (ratio {e_awq / e_rtn:.3f}, tol 0.9)")


def test_c06_grid_search_oracle():
    with Criterion(6, "search_scales alpha == brute-force grid argmin on 20 small layers", 30) as c:
        rng = np.random.default_rng(6)
        matches, worst = 0, 0.0
        for _ in range(20):
            w = rng.standard_normal((8, 32)).astype(np.float32)
            x = (rng.standard_normal((8, 32)) * rng.lognormal(0, 1.5, 32)).astype(np.float32)
            cfg = QuantConfig(bits=3, group_size=16, alpha_grid_size=20)
            res = search_scales(w, collect_calib_stats(x), cfg)
            alpha, loss = brute_force_alpha(w, x, 3, 16, 20)
            matches += res.alpha == alpha
            worst = max(worst, abs(res.loss - loss) / loss)
        c.finish(matches == 20, f"{matches}/20 exact alpha matches, max loss rel diff {worst:.2e}")


def test_c07_packing(data_dir):
    with Criterion(7, "pack round trips, simd128 golden bytes, permutation formula", 10) as c:
        rng = np.random.default_rng(7)
        n_vec, bad = 0, 0
        for i in range(10_000):
            layout = LAYOUTS[i % 3]
            bits = (2, 4)[i % 2] if layout != "linear" else (2, 3, 4, 8)[i % 4]
            q = rng.integers(-(2 ** (bits - 1)), 2 ** (bits - 1), int(rng.integers(1, 200)))
            bad += not np.array_equal(unpack(pack(q, bits, layout)), q)
            n_vec += 1
        golden = (data_dir / "simd128_q4.bin").read_bytes()
        codes = [u - 8 for u in list(range(16)) + list(range(15, -1, -1))]
        golden_ok = pack(codes, 4, "simd128").payload == golden == pack_scalar(codes, 4, "simd128")
        enumerated = [k + 16 * m for k in range(16) for m in range(2)]
        perm_ok = [(j % 2) * 16 + j // 2 for j in range(32)] == enumerated == simd128_permutation(4).tolist()
        c.finish(bad == 0 and golden_ok and perm_ok,
                 f"{n_vec - bad}/{n_vec} round trips exact, golden {'ok' if golden_ok else 'MISMATCH'} "
                 f"({golden[:4].hex()}), permutation {'ok' if perm_ok else 'MISMATCH'}")


def test_c08_kernel_oracle():
    with Criterion(8, "fused gemv/gemm vs reference within 2e-3 relative on 1000 layers", 60) as c:
        rng = np.random.default_rng(8)
        worst = 0.0
        for i in range(1000):
            layout = LAYOUTS[i % 3]
            bits = (2, 4)[i % 2] if layout != "linear" else (2, 3, 4)[i % 3]
            mode = ("symmetric", "asymmetric")[(i // 3) % 2]
            out, n = int(rng.integers(1, 48)), int(rng.integers(1, 300))
            group = int(rng.choice([16, 32, 64, 128]))
            w = rng.standard_normal((out, n)).astype(np.float32)
            gq = quantize_group_rtn(w, QuantConfig(bits=bits, group_size=group, mode=mode))
            layer = LinearLayerPacked.from_group_quant(gq, rng.uniform(0.5, 2, n).astype(np.float32), layout)
            x = rng.standard_normal((1 + i % 4, n)).astype(np.float32)
            y = gemv_fused(layer, x[0]) if i % 2 else gemm_fused(layer, x)
            ref = reference_forward(layer, x[0] if i % 2 else x)
            worst = max(worst, float(np.linalg.norm(y - ref) / max(np.linalg.norm(ref), 1e-30)))
        c.finish(worst <= 2e-3, f"max relative error {worst:.2e} (tol 2e-3)")


def test_c09_traffic_accounting():
    with Criterion(9, "INT4 g128 weight bytes vs FP16 = 4x within 5%", 1) as c:
        out = n = 4096
        closed = out * n * 2 / (out * n * 0.5 + out * (n / 128) * 2)
        reported = out * n * 2 / weight_traffic_bytes(out, n, 4, 128, scale_bytes=2)
        w = np.random.default_rng(9).standard_normal((256, 512))
        layer = LinearLayerPacked.from_group_quant(quantize_group_rtn(w, QuantConfig(bits=4)), layout="simd128")
        rec = bench_kernel(layer, repeats=3)
        rec_closed = 256 * 512 * 2 / (256 * 512 * 0.5 + 256 * 4 * 2)
        dev = abs(reported - 4) / 4
        c.finish(reported == closed and rec.reduction_vs_fp16 == rec_closed and dev < 0.05,
                 f"{reported:.4f}x vs FP16 ({dev * 100:.2f}% below 4x, tol 5%), "
                 f"{out * n * 4 / weight_traffic_bytes(out, n, 4, 128):.4f}x vs FP32")


def test_c10_kernel_speedup():
    with Criterion(10, "simd128 fused >= 1.2x naive unpack baseline, 4096x4096, tokens=1") as c:
        w = np.random.default_rng(10).standard_normal((4096, 4096)).astype(np.float32)
        layer = LinearLayerPacked.from_group_quant(quantize_group_rtn(w, QuantConfig(bits=4)), layout="simd128")
        rec = bench_kernel(layer, tokens=1, repeats=5)
        c.finish(rec.meets_speedup_target,
                 f"{rec.speedup_vs_baseline:.2f}x ({rec.median_s * 1e3:.1f} ms vs {rec.baseline_median_s * 1e3:.1f} ms)",
                 soft=True)


def test_c11_calibration_efficiency(tiny_model):
    with Criterion(11, "held-out error with 16 x 32-token sequences within 10% of 192", 60) as c:
        fp, held, ref = tiny_model
        cfg = QuantConfig(bits=3, group_size=128)
        errs = {}
        for seqs in (16, 192):
            calib = capture_activations(fp, synthetic_inputs(seqs * 32, 256, seed=11))
            q, _ = quantize_model(fp, calib, cfg, "awq")
            errs[seqs] = relative_error(q.forward(held), ref)
        gap = abs(errs[16] - errs[192]) / errs[192]
        c.finish(gap <= 0.10, f"16 seqs {errs[16]:.4f} vs 192 seqs {errs[192]:.4f} ({gap * 100:.2f}%, tol 10%)")


def test_c12_determinism(tmp_path):
    with Criterion(12, "quantize twice gives byte-identical checkpoints") as c:
        assert main(["generate", "--out", str(tmp_path), "--dim", "128", "--blocks", "2", "--seed", "12"]) == 0
        outs = []
        for k in range(2):
            path = tmp_path / f"q{k}.awqk"
            code = main(["quantize", "--model", str(tmp_path / "model.awqk"), "--calib", str(tmp_path / "calib.awqk"),
                         "--bits", "4", "--layout", "simd128", "--out", str(path), "--seed", "12"])
            outs.append((code, path.read_bytes() if path.exists() else b""))
        same = outs[0] == outs[1] and outs[0][0] == 0 and len(outs[0][1]) > 0
        c.finish(same, f"{len(outs[0][1])} bytes, {'identical' if same else 'DIFFERENT'}")
