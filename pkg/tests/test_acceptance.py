"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are collected in ``RESULTS`` and repeated in the terminal summary by
``conftest.py`` so they survive output capture.
"""

import contextlib
import json
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from gradcheck import max_grad_rel_err, weighted_sum
from waca import tensor as T
from waca.attention import (
    AttnGateParams,
    ChannelAttnParams,
    FusionConfig,
    SpatialAttnParams,
    attention_gate,
    channel_attention,
    waa,
)
from waca.backbone import CnxBlockParams, CnxWaaBlock, UNetConfig, WacaUNet, cnx_block, cnx_waa_block, save_checkpoint
from waca.cli import main as cli_main
from waca.evalkit import evaluate_suite, f1, hotspot_mask, mae
from waca.pdn import GenConfig, assemble_mna, gen_case, golden_drop, save_case, solve_cg, solve_dense
from waca.pipeline.losses import LossConfig, composite_loss, ffl, huber, ssim_loss
from waca.pipeline.train import TrainConfig, train
from waca.tensor import Tensor

from test_pdn import small_grid

RESULTS: dict = {}

DESK = dict(train_seeds=range(0, 64), val_seeds=range(100, 116), test_seeds=range(200, 216),
            widths=(16, 32, 64), epochs=60, batch_size=4, lr_max=1e-3, lr_min=1e-5, seed=0)


@contextlib.contextmanager
def criterion(num: int, title: str):
    """Record PASS/FAIL plus free-form details for one criterion."""
    info: dict = {}
    start = time.perf_counter()
    status = "FAIL"
    try:
        yield info
        status = "PASS"
    finally:
        info["runtime_s"] = round(time.perf_counter() - start, 1)
        detail = ", ".join(f"{k}={v}" for k, v in info.items())
        line = f"criterion {num} [{status}] {title}: {detail}"
        RESULTS[num] = line
        print(line)


def perturbed(module, rng, scale=0.3):
    for p in module.parameters():
        p.data = p.data + rng.standard_normal(p.shape) * scale
    return module


# ---------------------------------------------------------------------------
# 1. gradient suite
# ---------------------------------------------------------------------------


def gradient_cases(rng):
    """(name, scalar fn, tensors) for every op and composite module, inputs at most 2x4x8x8."""

    def leaf(*shape, positive=False):
        data = rng.uniform(0.5, 2.0, shape) if positive else rng.standard_normal(shape)
        return Tensor(data, requires_grad=True)

    x = leaf(2, 4, 8, 8)
    a, b = leaf(2, 4, 8, 8), leaf(2, 4, 8, 8, positive=True)
    cases = [
        ("add/mul/div/pow", lambda: weighted_sum(a * b + a / b + b**1.5 - a), [a, b]),
        ("exp/log/sqrt/abs", lambda: weighted_sum((a * 0.5).exp() + b.log() + b.sqrt() + a.abs()), [a, b]),
        ("reshape/transpose", lambda: weighted_sum(x.reshape(2, 4, 64).transpose(0, 2, 1)), [x]),
        ("sum/mean/max", lambda: weighted_sum(x.sum(axis=1)) + weighted_sum(x.mean(axis=(2, 3)), 1)
         + weighted_sum(x.max(axis=3), 2), [x]),
        ("concat", lambda: weighted_sum(T.concat([x, b], axis=1)), [x, b]),
    ]
    w, wb = leaf(4, 2, 3, 3), leaf(4)
    cases.append(("conv2d grouped/strided", lambda: weighted_sum(T.conv2d(x, w, wb, stride=2, padding=1, groups=2)),
                  [x, w, wb]))
    lw, lb = leaf(3, 8), leaf(3)
    xl = leaf(2, 8)
    cases.append(("linear", lambda: weighted_sum(T.linear(xl, lw, lb)), [xl, lw, lb]))
    for name, fn in (("relu", T.relu), ("gelu", T.gelu), ("sigmoid", T.sigmoid)):
        cases.append((name, lambda fn=fn: weighted_sum(fn(x)), [x]))
    cases += [
        ("global pools", lambda: weighted_sum(T.global_avg_pool(x)) + weighted_sum(T.global_max_pool(x), 1), [x]),
        ("channel_pool_spatial", lambda: weighted_sum(T.channel_pool_spatial(x)), [x]),
        ("resize_bilinear", lambda: weighted_sum(T.resize_bilinear(x, 5, 11)), [x]),
    ]
    g, be = leaf(4), leaf(4)
    cases.append(("layer_norm", lambda: weighted_sum(T.layer_norm_channelwise(x, g, be)), [x, g, be]))
    cases.append(("grn", lambda: weighted_sum(T.grn(x, g, be)), [x, g, be]))

    pred, tgt = leaf(2, 1, 8, 8), rng.standard_normal((2, 1, 8, 8)) * 2
    cfg = LossConfig()
    cases += [
        ("huber", lambda: huber(pred, tgt), [pred]),
        ("ssim loss", lambda: ssim_loss(pred, tgt, cfg), [pred]),
        ("focal frequency loss", lambda: ffl(pred, tgt, cfg), [pred]),
        ("composite loss", lambda: composite_loss(pred, tgt, cfg), [pred]),
    ]

    for kind in ("se", "cbam", "waca_se", "waca_cbam"):
        p = perturbed(ChannelAttnParams(4, 2, rng), rng)
        cases.append((kind, lambda p=p, kind=kind: weighted_sum(channel_attention(x, p, kind)[0]), [x] + p.parameters()))
    cp, sp = perturbed(ChannelAttnParams(4, 2, rng), rng), perturbed(SpatialAttnParams(7, rng), rng)
    cases.append(("waa", lambda: weighted_sum(waa(x, cp, sp)[0]), [x] + cp.parameters() + sp.parameters()))
    gate_in = leaf(2, 3, 8, 8)
    gp = perturbed(AttnGateParams(3, 4, rng=rng), rng)
    cases.append(("attention gate", lambda: weighted_sum(attention_gate(gate_in, x, gp)), [gate_in, x] + gp.parameters()))
    cnx = perturbed(CnxBlockParams(4, rng), rng)
    cases.append(("cnx block", lambda: weighted_sum(cnx_block(x, cnx)), [x] + cnx.parameters()))
    blk = perturbed(CnxWaaBlock(4, UNetConfig(widths=(4,), r=2), rng), rng)
    cases.append(("cnx+waa block", lambda: weighted_sum(cnx_waa_block(x, blk)[0]), [x] + blk.parameters()))
    net = perturbed(WacaUNet(UNetConfig(in_channels=4, widths=(4, 8), r=2), seed=3), rng, 0.2)
    cases.append(("2-stage unet (all params)", lambda: weighted_sum(net(x)), [x] + net.parameters()))
    unet_target = rng.standard_normal((2, 1, 8, 8))
    cases.append(("2-stage unet + composite loss",
                  lambda: composite_loss(net(x), unet_target, cfg), [x] + net.parameters()[::7]))
    return cases


def test_criterion_1_gradient_suite():
    with criterion(1, "central finite differences, rel err < 1e-4, < 120 s") as info:
        rng = np.random.default_rng(2024)
        start = time.perf_counter()
        errors = {name: max_grad_rel_err(fn, ts) for name, fn, ts in gradient_cases(rng)}
        elapsed = time.perf_counter() - start
        worst = max(errors, key=errors.get)
        info.update(checks=len(errors), worst=f"{worst}:{errors[worst]:.2e}", elapsed_s=round(elapsed, 1))
        bad = {k: v for k, v in errors.items() if not v < 1e-4}
        assert not bad, bad
        assert elapsed < 120


# ---------------------------------------------------------------------------
# 2. parameter parity
# ---------------------------------------------------------------------------


def test_criterion_2_zero_extra_parameters():
    with criterion(2, "waca kinds add no parameters, C in {8,16,64}, r in {2,4}") as info:
        checked = 0
        for c in (8, 16, 64):
            for r in (2, 4):
                counts = {}
                for kind in ("se", "cbam", "waca_se", "waca_cbam"):
                    cfg = UNetConfig(widths=(c,), attention_kind=kind, r=r)
                    counts[kind] = CnxWaaBlock(c, cfg).num_parameters()
                assert counts["waca_se"] == counts["se"] and counts["waca_cbam"] == counts["cbam"], (c, r, counts)
                model = {k: WacaUNet(UNetConfig(widths=(c, 2 * c), attention_kind=k, r=r)).num_parameters()
                         for k in ("se", "cbam", "waca_se", "waca_cbam")}
                assert model["waca_se"] == model["se"] and model["waca_cbam"] == model["cbam"], (c, r, model)
                checked += 1
        info["configs"] = checked


# ---------------------------------------------------------------------------
# 3. alpha = 1 degeneracy
# ---------------------------------------------------------------------------


def test_criterion_3_alpha_one_degeneracy():
    with criterion(3, "alpha=1 reproduces SE/CBAM within 1e-12 on 100 inputs") as info:
        rng = np.random.default_rng(3)
        worst = 0.0
        one = FusionConfig(alpha=1.0)
        for _ in range(100):
            c = int(rng.choice([4, 8, 16]))
            p = ChannelAttnParams(c, 2, rng)
            perturbed(p, rng, 0.5)
            x = Tensor(rng.standard_normal((int(rng.integers(1, 3)), c, int(rng.integers(1, 9)), int(rng.integers(1, 9)))))
            for waca_kind, base in (("waca_se", "se"), ("waca_cbam", "cbam")):
                y = channel_attention(x, p, waca_kind, one)[0].data
                ref = channel_attention(x, p, base)[0].data
                worst = max(worst, float(np.max(np.abs(y - ref))))
        info["max_abs_diff"] = f"{worst:.1e}"
        assert worst <= 1e-12


# ---------------------------------------------------------------------------
# 4. golden solver
# ---------------------------------------------------------------------------


def test_criterion_4_golden_solver():
    with criterion(4, "CG vs dense < 1e-8 and invariants at 1e-9 on 50 grids, < 60 s") as info:
        rng = np.random.default_rng(44)
        start = time.perf_counter()
        grids = [small_grid(rng) for _ in range(50)]
        worst_dense = worst_inv = 0.0
        layer_counts = set()
        for g in grids:
            layer_counts.add(len(g.layers))
            assert g.num_nodes <= 100
            sys = assemble_mna(g)
            d, c = solve_dense(sys), solve_cg(sys)
            worst_dense = max(worst_dense, float(np.linalg.norm(c - d) / np.linalg.norm(d)))

            drop = golden_drop(g)
            scale = max(float(np.max(np.abs(drop))), 1e-300)
            # linearity
            d2 = golden_drop(g.with_currents(2.5 * g.currents))
            worst_inv = max(worst_inv, float(np.max(np.abs(d2 - 2.5 * drop))) / max(float(d2.max()), 1e-300))
            # superposition
            j2 = rng.uniform(0, 0.01, g.currents.shape)
            both = golden_drop(g.with_currents(g.currents + j2))
            split = drop + golden_drop(g.with_currents(j2))
            worst_inv = max(worst_inv, float(np.max(np.abs(both - split))) / float(both.max()))
            # maximum principle: drops are nonnegative and vanish at bottom-layer pads
            assert drop.min() >= -1e-9 * scale
            for lay, i, j in g.pads:
                if lay == 0:
                    assert drop[i, j] == 0.0
            # monotonicity: adding load never lowers any drop
            extra = np.zeros_like(g.currents)
            extra[rng.integers(g.h), rng.integers(g.w)] = 0.01
            more = golden_drop(g.with_currents(g.currents + extra))
            assert np.all(more >= drop - 1e-9 * float(more.max()))
        elapsed = time.perf_counter() - start
        info.update(grids=len(grids), layers=sorted(layer_counts), cg_vs_dense=f"{worst_dense:.1e}",
                    invariants=f"{worst_inv:.1e}", elapsed_s=round(elapsed, 1))
        assert worst_dense < 1e-8
        assert worst_inv <= 1e-9
        assert elapsed < 60


# ---------------------------------------------------------------------------
# 5. metric protocol
# ---------------------------------------------------------------------------


def test_criterion_5_metric_protocol():
    with criterion(5, "metric unit examples exact; scale invariance and argmax on 1000 maps") as info:
        assert mae(np.ones((1, 2, 2)), np.ones((1, 2, 2))) == 0.0
        assert mae(np.array([1.0, 2.0]), np.array([2.0, 4.0])) == 1.5
        assert hotspot_mask(np.array([1.0, 0.95, 0.89])).tolist() == [True, True, False]
        assert hotspot_mask(np.full((1, 4, 4), 3.0)).all()
        assert not hotspot_mask(np.zeros((1, 4, 4))).any()
        m = np.array([True, False, True, True])
        assert f1(m, m)[0] == 1.0
        assert f1(np.array([True, False]), np.array([False, True]))[0] == 0.0
        score, tp, fp, fn = f1(np.array([1, 1, 1, 0, 0], bool), np.array([1, 1, 0, 1, 0], bool))
        assert (tp, fp, fn) == (2, 1, 1) and score == 4 / 6
        assert f1(np.zeros(3, bool), np.zeros(3, bool))[0] == 1.0

        rng = np.random.default_rng(5)
        for _ in range(1000):
            h, w = int(rng.integers(1, 33)), int(rng.integers(1, 33))
            mp = rng.uniform(0, 1, (1, h, w)) ** float(rng.uniform(0.5, 4)) * float(rng.uniform(0.01, 100))
            base = hotspot_mask(mp)
            assert base.flat[np.argmax(mp)]
            c = float(np.exp(rng.uniform(-10, 10)))
            np.testing.assert_array_equal(hotspot_mask(c * mp), base)
            perm = rng.permutation(mp.size)
            np.testing.assert_array_equal(hotspot_mask(mp.ravel()[perm]), base.ravel()[perm])
        info["random_maps"] = 1000


# ---------------------------------------------------------------------------
# 6, 7, 9. desk-scale training
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def desk_data():
    def gen(seeds):
        return [gen_case(s, GenConfig(h=64, w=64)) for s in seeds]

    return gen(DESK["train_seeds"]), gen(DESK["val_seeds"]), gen(DESK["test_seeds"])


def desk_run(kind: str, data) -> dict:
    tr, va, te = data
    cfg = UNetConfig(in_channels=6, widths=DESK["widths"], attention_kind=kind)
    tcfg = TrainConfig(epochs=DESK["epochs"], batch_size=DESK["batch_size"], lr_max=DESK["lr_max"],
                       lr_min=DESK["lr_min"], seed=DESK["seed"])
    start = time.perf_counter()
    with threadpool_limits(limits=1):
        ckpt = train(WacaUNet(cfg, seed=DESK["seed"]), tr, va, tcfg)
    elapsed = time.perf_counter() - start
    res = evaluate_suite(ckpt, te)
    losses = {row["epoch"]: row["loss"] for row in ckpt.history}
    return dict(kind=kind, ckpt=ckpt, test_f1=res.aggregate.f1, test_mae=res.aggregate.mae_mv,
                f1_std=res.f1_std, first_loss=losses[1], final_loss=losses[DESK["epochs"]],
                best_epoch=ckpt.epoch, train_s=elapsed)


@pytest.fixture(scope="session")
def desk_waca(desk_data):
    return desk_run("waca_cbam", desk_data)


def test_criterion_6_learning_smoke(desk_waca):
    with criterion(6, "waca_cbam desk run: final loss <= 0.5x epoch-1 loss, held-out F1 >= 0.5, < 30 min") as info:
        r = desk_waca
        info.update(epoch1_loss=f"{r['first_loss']:.3f}", final_loss=f"{r['final_loss']:.3f}",
                    test_f1=f"{r['test_f1']:.4f}", test_mae_mv=f"{r['test_mae']:.4f}",
                    best_epoch=r["best_epoch"], train_s=round(r["train_s"], 1))
        assert r["final_loss"] <= 0.5 * r["first_loss"]
        assert r["test_f1"] >= 0.5
        assert r["train_s"] < 30 * 60


def test_criterion_7_ablation_report(desk_data, desk_waca):
    with criterion(7, "five-way ablation on the desk benchmark (reported, not gated)") as info:
        runs = {"waca_cbam": desk_waca}
        for kind in ("none", "se", "cbam", "waca_se"):
            runs[kind] = desk_run(kind, desk_data)
        lines = [f"{'kind':<10} {'MAE mV':>8} {'F1':>7} {'F1 std':>7} {'best ep':>7} {'train s':>8}"]
        for kind in ("none", "se", "cbam", "waca_se", "waca_cbam"):
            r = runs[kind]
            lines.append(f"{kind:<10} {r['test_mae']:>8.4f} {r['test_f1']:>7.4f} {r['f1_std']:>7.4f} "
                         f"{r['best_epoch']:>7d} {r['train_s']:>8.1f}")
        print("\n".join(lines))
        info["waca_se>=se"] = runs["waca_se"]["test_f1"] >= runs["se"]["test_f1"]
        info["waca_cbam>=cbam"] = runs["waca_cbam"]["test_f1"] >= runs["cbam"]["test_f1"]
        info["table"] = json.dumps({k: [round(v["test_mae"], 4), round(v["test_f1"], 4)] for k, v in runs.items()})


def test_criterion_9_attention_export(desk_waca, desk_data, tmp_path):
    with criterion(9, "inspect-attn on the desk checkpoint: scores in (0,1), fused exact to 1e-12") as info:
        ck_path = tmp_path / "checkpoint.wtnc"
        save_checkpoint(desk_waca["ckpt"], ck_path)
        case = desk_data[2][0]
        case_dir = save_case(case, tmp_path / "cases")
        assert cli_main(["inspect-attn", "--checkpoint", str(ck_path), "--case", str(case_dir),
                         "--out", str(tmp_path / "attn")]) == 0
        recs = json.loads((tmp_path / "attn" / "attention.json").read_text())
        alpha = desk_waca["ckpt"].config.alpha
        widths = DESK["widths"]
        expected = list(widths) + list(widths[-2::-1])
        assert [len(r["fused"]) for r in recs] == expected
        worst = 0.0
        for r in recs:
            s1, s2, fused = (np.array(r[k]) for k in ("stage1", "stage2", "fused"))
            for s in (s1, s2, fused):
                assert np.all((s > 0) & (s < 1))
            worst = max(worst, float(np.max(np.abs(fused - (alpha * s1 + (1 - alpha) * s2)))))
        info.update(blocks=len(recs), max_fuse_err=f"{worst:.1e}")
        assert worst <= 1e-12


# ---------------------------------------------------------------------------
# 8. determinism through the CLI
# ---------------------------------------------------------------------------


def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"}


def test_criterion_8_determinism(tmp_path):
    with criterion(8, "gen-data and train reruns are byte-identical across worker counts") as info:
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"gen": {"h": 32, "w": 32}, "model": {"widths": [8, 16]},
                                   "train": {"epochs": 3, "batch_size": 4}}))
        for name, workers in (("d1", 1), ("d4", 4), ("d1b", 1)):
            assert cli_main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / name), "--count", "12",
                             "--seed", "11", "--workers", str(workers)]) == 0
        assert cli_main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "v"), "--count", "4",
                         "--seed", "50", "--workers", "2"]) == 0
        d1 = _tree(tmp_path / "d1")
        assert d1 == _tree(tmp_path / "d4") == _tree(tmp_path / "d1b")
        ckpts = []
        for name, data in (("t1", "d1"), ("t2", "d4")):
            assert cli_main(["train", "--config", str(cfg), "--data", str(tmp_path / data), "--val", str(tmp_path / "v"),
                             "--out", str(tmp_path / name), "--seed", "4"]) == 0
            ckpts.append((tmp_path / name / "checkpoint.wtnc").read_bytes())
        assert ckpts[0] == ckpts[1]
        info.update(case_files=len(d1), checkpoint_bytes=len(ckpts[0]))
