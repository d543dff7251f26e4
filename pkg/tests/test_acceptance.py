"""Acceptance suite: one test per criterion, each reported as PASS/FAIL in the
terminal summary.

The training criteria (9 to 12) take tens of minutes on one CPU core. Set
GANSEG_ACCEPTANCE_DIR to keep the ensemble workspace between sessions;
otherwise it lives in a pytest temporary directory and is rebuilt.
"""
import os
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ganseg import pipeline
from ganseg.augment import AugmentConfig
from ganseg.config import ExperimentConfig
from ganseg.dataio import Subject5C, Volume, build_dataset, generate_phantom, preprocess_subject
from ganseg.evaluation import bonferroni, dice, read_results_csv, relative_improvement, sign_flip_test
from ganseg.gan import GanCheckpoint, partition_quota, threshold_annotations
from ganseg.gan.train import gradient_penalty
from ganseg.numerics import Tensor, check_gradients, concat
from ganseg.numerics import functional as F
from ganseg.numerics.optim import poly_lr
from ganseg.segmenter import UNetConfig, build_unet, deep_supervision_loss, deep_supervision_weights
from ganseg.segmenter.train import TrainConfig, evaluate_dataset, mixed_batch_sampler, train_segmenter

INSTANCES = 20
H = 1e-5
PALETTE = np.array([0, 51, 102, 204])


# ---------------------------------------------------------------- 1


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _case(name, rng):
    """(loss closure, parameters) for one random instance of ``name``."""
    def param(*shape, positive=False, kink=False):
        data = rng.uniform(0.5, 2.0, shape) if positive else (_away_from_zero(rng, shape) if kink else rng.normal(size=shape))
        return Tensor(data, requires_grad=True)

    def proj(shape):
        return Tensor(rng.normal(size=shape))

    if name == "add_mul_broadcast":
        a, b = param(3, 4), param(4)
        w = proj((3, 4))
        return lambda: ((a + b) * a * w).sum(), [a, b]
    if name == "sub_neg_div":
        a, b = param(3, 4), param(3, 4, positive=True)
        w = proj((3, 4))
        return lambda: ((-a - b) / b * w).sum(), [a, b]
    if name == "pow":
        a = param(5, positive=True)
        return lambda: (a ** 2.5).sum() + (a ** -0.5).sum(), [a]
    if name == "exp_log_sqrt":
        a = param(6, positive=True)
        return lambda: (a.exp() * 0.1).sum() + a.log().sum() + a.sqrt().sum(), [a]
    if name == "tanh":
        a = param(2, 5)
        w = proj((2, 5))
        return lambda: (a.tanh() * w).sum(), [a]
    if name == "leaky_relu":
        a = param(4, 5, kink=True)
        w = proj((4, 5))
        return lambda: (F.leaky_relu(a, 0.2) * w).sum(), [a]
    if name == "sum_mean_axes":
        a = param(2, 3, 4)
        w = proj((2, 4))
        return lambda: (a.sum(axis=1) * w).sum() + (a.mean(axis=(0, 2)) ** 2).sum(), [a]
    if name == "matmul_transpose":
        a, b = param(3, 4), param(5, 4)
        w = proj((3, 5))
        return lambda: ((a @ b.T) * w).sum(), [a, b]
    if name == "reshape_getitem_concat":
        a, b = param(2, 6), param(2, 3)
        w = proj((2, 3, 2))
        return lambda: (concat([a.reshape(2, 2, 3)[:, 1:], b.reshape(2, 1, 3)], axis=1).transpose(0, 2, 1) * w).sum(), [a, b]
    if name == "conv2d":
        x, k, bias = param(2, 3, 5, 5), param(4, 3, 3, 3), param(4)
        stride, pad = (1, 1) if rng.uniform() < 0.5 else (2, 0)
        out_hw = (5 + 2 * pad - 3) // stride + 1
        w = proj((2, 4, out_hw, out_hw))
        return lambda: (F.conv2d(x, k, bias, stride=stride, padding=pad) * w).sum(), [x, k, bias]
    if name == "linear":
        x, wt, b = param(3, 4), param(4, 2), param(2)
        w = proj((3, 2))
        return lambda: (F.linear(x, wt, b) * w).sum(), [x, wt, b]
    if name == "instance_norm":
        x, g, s = param(2, 3, 4, 4), param(3), param(3)
        w = proj((2, 3, 4, 4))
        return lambda: (F.instance_norm(x, g, s) * w).sum(), [x, g, s]
    if name == "pixel_norm":
        x = param(2, 4, 3, 3)
        w = proj((2, 4, 3, 3))
        return lambda: (F.pixel_norm(x) * w).sum(), [x]
    if name == "minibatch_stddev":
        x = param(3, 2, 4, 4)
        w = proj((3, 3, 4, 4))
        return lambda: (F.minibatch_stddev(x) * w).sum(), [x]
    if name == "upsample_avgpool_downsample":
        x = param(1, 2, 4, 4)
        w1, w2 = proj((1, 2, 8, 8)), proj((1, 2, 1, 1))
        return lambda: (F.avg_pool2(F.upsample_nearest(x, 2) * w1)).sum() + (F.downsample(x, 4) * w2).sum(), [x]
    if name == "log_softmax_softmax":
        x = param(2, 4, 3, 3)
        w1, w2 = proj((2, 4, 3, 3)), proj((2, 4, 3, 3))
        return lambda: (F.log_softmax(x) * w1).sum() + (F.softmax(x) * w2).sum(), [x]
    if name == "cross_entropy":
        x = param(2, 4, 3, 3)
        t = rng.integers(0, 4, (2, 3, 3))
        return lambda: F.softmax_cross_entropy(x, t), [x]
    if name == "soft_dice":
        x = param(2, 4, 3, 3)
        t = F.one_hot(rng.integers(0, 4, (2, 3, 3)), 4, np.float64)
        return lambda: F.soft_dice_loss(F.softmax(x), t), [x]
    if name == "gradient_penalty":
        wt = param(12, 1)
        real, fake = rng.normal(size=(3, 3, 2, 2)), rng.normal(size=(3, 3, 2, 2))
        mix = rng.uniform(size=(3, 1, 1, 1))

        def critic(x):
            return F.linear(x.reshape(3, 12), wt).tanh().reshape(-1)

        return lambda: gradient_penalty(critic, real, fake, mix)[0], [wt]
    if name == "unet_loss":
        model = build_unet(UNetConfig(depth=2, base_width=2), int(rng.integers(2**31)))
        for p in model.parameters():
            p.data = p.data.astype(np.float64)
        x = Tensor(rng.normal(size=(2, 4, 4, 4)))
        t = rng.integers(0, 4, (2, 4, 4))
        return lambda: deep_supervision_loss(model(x), t), model.parameters()
    raise KeyError(name)


OPS = ["add_mul_broadcast", "sub_neg_div", "pow", "exp_log_sqrt", "tanh", "leaky_relu", "sum_mean_axes",
       "matmul_transpose", "reshape_getitem_concat", "conv2d", "linear", "instance_norm", "pixel_norm",
       "minibatch_stddev", "upsample_avgpool_downsample", "log_softmax_softmax", "cross_entropy", "soft_dice",
       "gradient_penalty", "unet_loss"]


def test_criterion_01_gradient_correctness(criterion):
    with criterion(1, "finite-difference gradient checks") as c:
        start = time.monotonic()
        worst = {}
        for name in OPS:
            rng = np.random.default_rng(OPS.index(name))
            errs = []
            for _ in range(INSTANCES):
                fn, params = _case(name, rng)
                errs.append(check_gradients(fn, params, h=H))
            worst[name] = max(errs)
        elapsed = time.monotonic() - start
        top = max(worst, key=worst.get)
        c.detail = f"{len(OPS)} ops x {INSTANCES}, worst {top} {worst[top]:.2e}, {elapsed:.0f}s"
        assert all(v < 1e-4 for v in worst.values()), worst
        assert elapsed < 300


# ---------------------------------------------------------------- 2


def test_criterion_02_preprocessing(criterion):
    with criterion(2, "preprocessing exactness") as c:
        t1 = np.zeros((240, 240, 3), np.float32)
        flat0 = t1[:, :, 0].reshape(-1)
        flat0[:8640] = 51.0
        flat0[0] = 255.0
        t1[:, :, 0] = flat0.reshape(240, 240)
        flat1 = t1[:, :, 1].reshape(-1)
        flat1[:8639] = 51.0
        t1[:, :, 1] = flat1.reshape(240, 240)
        ramp = np.zeros((240, 240, 3), np.float32)
        ramp[0, 0, 0], ramp[1, 0, 0], ramp[2, 0, 0] = 1000.0, 500.0, 250.0
        labels = np.zeros((240, 240, 3), np.uint8)
        labels[10:20, 10:20, 0] = 1
        labels[30:40, 10:20, 0] = 2
        labels[50:60, 10:20, 0] = 4
        subject = Subject5C("F1", [Volume(t1), Volume(ramp), Volume(ramp * 2), Volume(ramp + 7)], Volume(labels))
        samples = preprocess_subject(subject)
        assert [s.z for s in samples] == [0]
        (s,) = samples
        assert s.image.shape == (4, 256, 256) and s.annotation.shape == (256, 256)
        inner = (slice(8, 248), slice(8, 248))
        np.testing.assert_array_equal(s.image[0][inner], t1[:, :, 0])
        assert s.image[:, :8].sum() == 0 and s.image[:, 248:].sum() == 0
        assert s.image[:, :, :8].sum() == 0 and s.image[:, :, 248:].sum() == 0
        assert s.image[1, 8, 8] == 255.0 and s.image[1, 9, 8] == 127.5 and s.image[1, 10, 8] == 63.75
        np.testing.assert_array_equal(s.image[2], s.image[1])
        expected = np.zeros((256, 256), np.uint8)
        expected[18:28, 18:28], expected[38:48, 18:28], expected[58:68, 18:28] = 51, 102, 204
        np.testing.assert_array_equal(s.annotation, expected)
        c.detail = "8640 kept / 8639 dropped, 240->256 centred, remap and rescale exact"


# ---------------------------------------------------------------- 3


@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=64))
def _idempotent(values):
    once = threshold_annotations(values)
    np.testing.assert_array_equal(threshold_annotations(once), once)


def test_criterion_03_threshold(criterion):
    with criterion(3, "annotation thresholding") as c:
        start = time.monotonic()
        v = np.arange(256)
        dist = np.abs(v[:, None] - PALETTE[None, :])
        # the oracle breaks exact ties (153 between 102 and 204) toward the larger value
        oracle = PALETTE[len(PALETTE) - 1 - np.argmin(dist[:, ::-1], axis=1)]
        np.testing.assert_array_equal(threshold_annotations(v), oracle)
        elapsed = time.monotonic() - start
        _idempotent()
        c.detail = f"256 inputs match argmin oracle in {elapsed * 1e3:.1f} ms; idempotence property held"
        assert elapsed < 1


# ---------------------------------------------------------------- 4


def test_criterion_04_quota(criterion):
    with criterion(4, "quota partitioning") as c:
        rng = np.random.default_rng(4)
        for _ in range(1000):
            budget, k = int(rng.integers(0, 10**6)), int(rng.integers(1, 101))
            q = partition_quota(budget, k)
            assert sum(q) == budget and len(q) == k and max(q) - min(q) <= 1
        assert partition_quota(100_000, 5) == [20_000] * 5
        assert partition_quota(100_000, 10) == [10_000] * 10
        c.detail = "1000 random pairs; (100000,5) and (100000,10) exact"


# ---------------------------------------------------------------- 5


def test_criterion_05_dice_oracle(criterion):
    with criterion(5, "Dice oracle equivalence") as c:
        rng = np.random.default_rng(5)
        for _ in range(500):
            shape = tuple(rng.integers(1, 7, size=rng.integers(1, 4)))
            p = rng.uniform(size=shape) < rng.uniform()
            g = rng.uniform(size=shape) < rng.uniform()
            ps = {i for i, on in enumerate(p.ravel()) if on}
            gs = {i for i, on in enumerate(g.ravel()) if on}
            expected = 1.0 if not ps and not gs else 2 * len(ps & gs) / (len(ps) + len(gs))
            assert dice(p, g) == expected
            assert dice(g, p) == dice(p, g)
        assert dice(np.zeros((3, 3), bool), np.zeros((3, 3), bool)) == 1.0
        c.detail = "500 random pairs exact; symmetric; both-empty = 1"


# ---------------------------------------------------------------- 6


def test_criterion_06_statistics(criterion):
    with criterion(6, "sign-flip, Bonferroni, relative improvements") as c:
        diffs = np.full(10, 0.013)
        exact = sign_flip_test(diffs, mode="exhaustive", alternative="greater")
        assert exact.p_value == 1 / 1024
        mc = sign_flip_test(diffs, mode="monte_carlo", alternative="greater", n_permutations=100_000, seed=6)
        se = np.sqrt((1 / 1024) * (1 - 1 / 1024) / 100_000)
        assert abs(mc.p_value - 1 / 1024) <= 3 * se
        for p, m in [(0.01, 3), (0.5, 3), (0.004, 6), (0.2, 5)]:
            assert bonferroni([p], m) == [min(1.0, m * p)]
        improvements = [round(relative_improvement(a, b), 1) for a, b in [(0.665, 0.696), (0.632, 0.702), (0.478, 0.545)]]
        assert improvements == [4.7, 11.1, 14.0]
        c.detail = f"p=1/1024 exact, MC {mc.p_value:.6f}, improvements {improvements}"


# ---------------------------------------------------------------- 7


def test_criterion_07_supervision_and_lr(criterion):
    with criterion(7, "deep-supervision weights and LR schedule") as c:
        assert np.max(np.abs(deep_supervision_weights(5) - np.array([16, 8, 4, 2, 1]) / 31)) < 1e-12
        ds = build_dataset(generate_phantom(7, 2, (32, 32, 24)))
        cfg = TrainConfig(sample_budget=200, batch_size=4, val_interval=10)
        ck = train_segmenter(ds, None, ds.subset(np.arange(4)), UNetConfig(depth=3, base_width=4), cfg,
                             AugmentConfig.disabled(), seed=0)
        logged = [r["lr"] for r in ck.curve[1:]]
        steps = cfg.total_steps
        expected = [cfg.lr0 * (1 - t / steps) ** 0.9 for t in range(steps)]
        assert len(logged) == steps
        assert max(abs(a - b) for a, b in zip(logged, expected)) < 1e-15
        assert poly_lr(0, steps, cfg.lr0) == 5e-2
        c.detail = f"weights exact; {steps} logged learning rates match"


# ---------------------------------------------------------------- 8


def test_criterion_08_mixed_sampling(criterion):
    with criterion(8, "mixed real/synthetic sampling") as c:
        picks = mixed_batch_sampler(500, 2000, 10_000, np.random.default_rng(8))
        frac = sum(p == "real" for p, _ in picks) / 10_000
        c.detail = f"real fraction {frac:.4f}"
        assert 0.47 <= frac <= 0.53


# ---------------------------------------------------------------- 9


@pytest.mark.slow
def test_criterion_09_overfit(criterion):
    with criterion(9, "U-Net overfit smoke test") as c:
        start = time.monotonic()
        ds = build_dataset(generate_phantom(7, 8, (32, 32, 24)))
        fg = [i for i in range(len(ds)) if (ds.annotations[i] > 0).any()]
        fifty = ds.subset(np.array(fg[:50]))
        assert len(fifty) == 50
        cfg = TrainConfig(sample_budget=20_000, val_interval=100)
        ck = train_segmenter(fifty, None, fifty, UNetConfig(), cfg, AugmentConfig(), seed=0)
        score = float(evaluate_dataset(ck.build_model(), fifty).mean())
        losses = [r["train_loss"] for r in ck.curve[1:]]
        elapsed = time.monotonic() - start
        c.detail = f"mean foreground Dice {score:.4f} (best at step {ck.best_step}), {elapsed / 60:.1f} min"
        assert score > 0.90
        assert np.mean(losses[-50:]) < np.mean(losses[:50])
        assert elapsed < 30 * 60


# ---------------------------------------------------------------- 10-12

ENSEMBLE_CONFIG = {
    "gan": {"images_per_stage": 6000, "base_channels": 32},
    "ensemble": {"k_values": [1, 4], "budget": 2000},
    "train": {"sample_budget": 12_000, "repeats": 3, "val_interval": 100},
    "sweep": {"real_only": False, "mixed": False, "synthetic_only": True},
    "seed": 0,
}


@pytest.fixture(scope="module")
def ensemble_run(tmp_path_factory):
    """Phantom data, four GAN members, K=1 and K=4 synthetic sets, three
    synthetic-only segmenter repeats per K, evaluation and report."""
    root = os.environ.get("GANSEG_ACCEPTANCE_DIR") or tmp_path_factory.mktemp("acceptance")
    ws = pipeline.Workspace.create(ExperimentConfig.model_validate(ENSEMBLE_CONFIG), root)
    timings = {}
    start = time.monotonic()
    if not ws.path("data", "train.gsds").exists():
        pipeline.stage_phantom(ws)
    pipeline.stage_train_gan(ws)
    timings["gan"] = time.monotonic() - start
    pipeline.stage_gen_synth(ws)
    start = time.monotonic()
    pipeline.stage_train_seg(ws)
    timings["seg"] = time.monotonic() - start
    pipeline.stage_evaluate(ws)
    pipeline.stage_report(ws)
    return ws, timings


@pytest.mark.slow
def test_criterion_10_gan_trainability(criterion, ensemble_run):
    with criterion(10, "GAN trainability at 32x32") as c:
        ws, _ = ensemble_run
        ckpt = GanCheckpoint.load(ws.path("gans", 0))
        cfg = ckpt.config
        assert ckpt.resolution == 32 and ckpt.alpha == 1.0 and ckpt.images_seen >= cfg.total_images
        assert {r["resolution"] for r in ckpt.log} == {4, 8, 16, 32}
        finite = all(np.isfinite([r["d_loss"], r["g_loss"]]).all() for r in ckpt.log)
        synth = pipeline.load_synth(ws, 1)
        assert set(synth.member.tolist()) == {0}
        frac = float(np.mean([(a > 0).any() for a in synth.annotations]))
        c.detail = f"{len(ckpt.log)} steps finite={finite}; {frac:.1%} of {len(synth)} samples have foreground"
        assert finite
        assert frac >= 0.30


def _run_means(rows, config_id):
    by_run = {}
    for r in rows:
        if r["config_id"] == config_id:
            by_run.setdefault(r["run_id"], []).append(np.mean([r["dice_et"], r["dice_ed"], r["dice_ncr"]]))
    return {run: float(np.mean(v)) for run, v in sorted(by_run.items())}


@pytest.mark.slow
def test_criterion_11_ensemble_trend(criterion, ensemble_run):
    with criterion(11, "K=4 beats K=1 (synthetic-only, paired repeats)") as c:
        ws, timings = ensemble_run
        rows = read_results_csv(ws.path("eval", "results.csv"))
        k1, k4 = _run_means(rows, "synth-k1"), _run_means(rows, "synth-k4")
        assert k1.keys() == k4.keys() and len(k1) == 3
        wins = sum(k4[r] >= k1[r] for r in k1)
        pooled1, pooled4 = np.mean(list(k1.values())), np.mean(list(k4.values()))
        c.detail = (f"K=1 {[round(v, 4) for v in k1.values()]} mean {pooled1:.4f}; "
                    f"K=4 {[round(v, 4) for v in k4.values()]} mean {pooled4:.4f}; {wins}/3 paired wins")
        assert wins >= 2
        assert pooled4 > pooled1


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.slow
def test_criterion_12_determinism(criterion, ensemble_run, tmp_path):
    with criterion(12, "bit-identical reruns") as c:
        ws, _ = ensemble_run
        rerun = pipeline.Workspace.create(ws.config, tmp_path)
        checked = []

        # data: regenerate from scratch
        pipeline.stage_phantom(rerun)
        for name in ("train.gsds", "test.gsds", "split.json"):
            assert rerun.path("data", name).read_bytes() == ws.path("data", name).read_bytes(), name
        checked.append("data")

        # one GAN member retrained from its seed; the others copied
        shutil.copytree(ws.path("gans"), rerun.path("gans"))
        shutil.rmtree(rerun.path("gans", 1))
        pipeline.stage_train_gan(rerun)
        assert _tree(rerun.path("gans", 1)) == _tree(ws.path("gans", 1))
        checked.append("GAN member 1")

        pipeline.stage_gen_synth(rerun)
        for k in (1, 4):
            assert pipeline.synth_path(rerun, k).read_bytes() == pipeline.synth_path(ws, k).read_bytes()
        checked.append("synthetic sets")

        # one segmenter repeat retrained; the rest copied
        shutil.copytree(ws.path("seg"), rerun.path("seg"))
        shutil.rmtree(rerun.path("seg", "synth-k4", 2))
        pipeline.stage_train_seg(rerun)
        assert _tree(rerun.path("seg")) == _tree(ws.path("seg"))
        checked.append("segmenter repeat")

        pipeline.stage_evaluate(rerun)
        pipeline.stage_report(rerun)
        assert _tree(rerun.path("eval")) == _tree(ws.path("eval"))
        assert _tree(rerun.path("report")) == _tree(ws.path("report"))
        checked.append("evaluation and report")
        c.detail = ", ".join(checked)
