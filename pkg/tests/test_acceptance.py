"""One test per acceptance criterion, at the stated tolerances.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""

import json
import os
import time

import numpy as np
import pytest

from helpers import reduction_pair

from dynconv import cli
from dynconv.datasets import gen_oriented_bars, rotate_bars_dataset
from dynconv.dynamic_layers import (
    IMAGE_PRESETS,
    Context,
    DynamicConv,
    KernelBank,
    ModelSpec,
    apply_channel_gate,
    build_model,
    channel_attention,
    odconv_forward,
)
from dynconv.gradcheck import check_model, check_vjp
from dynconv.metrics import FoldResult, kfold_stats, miou
from dynconv.tensor_core import (
    ConvSpec,
    Prng,
    conv1d,
    conv1d_vjp,
    conv2d,
    conv2d_vjp,
    dense,
    dense_vjp,
    gap,
    gap_vjp,
    maxpool1d,
    maxpool1d_vjp,
    maxpool2d,
    maxpool2d_vjp,
    pointwise,
    pointwise_vjp,
    softmax,
    softmax_vjp,
)
from dynconv.training import (
    CallbackState,
    TrainConfig,
    checkpoint_best,
    early_stopping,
    reduce_lr_on_plateau,
    train,
)


def primitive_errors(seed):
    rng = Prng(seed)
    spec = ConvSpec.make(1 + rng.integers(2), rng.integers(2))
    x, w = rng.normal((2, 2, 6, 5)), rng.normal((3, 2, 3, 2))
    s, k1 = rng.normal((2, 2, 9)), rng.normal((3, 2, 3))
    z = rng.normal((3, 4))
    v, m, b = rng.normal((3, 5)), rng.normal((4, 5)), rng.normal(4)
    errs = {
        "conv2d": check_vjp(lambda a, c: conv2d(a, c, spec), [x, w], lambda g, a, c: conv2d_vjp(g, a, c, spec), rng),
        "conv1d": check_vjp(lambda a, c: conv1d(a, c, 1, 1), [s, k1], lambda g, a, c: conv1d_vjp(g, a, c, 1, 1), rng),
        "maxpool2d": check_vjp(maxpool2d, [x[:, :, :6, :4]], lambda g, a: (maxpool2d_vjp(g, a),), rng),
        "maxpool1d": check_vjp(maxpool1d, [s], lambda g, a: (maxpool1d_vjp(g, a),), rng),
        "gap": check_vjp(gap, [x], lambda g, a: (gap_vjp(g, a.shape),), rng),
        "dense": check_vjp(dense, [v, m, b], lambda g, a, ww, bb: dense_vjp(g, a, ww), rng),
        "softmax": check_vjp(softmax, [z], lambda g, a: (softmax_vjp(g, softmax(a)),), rng),
    }
    for fn in ("relu", "sigmoid", "tanh"):
        p = z.copy()
        p[np.abs(p) < 1e-3] = 0.5
        errs[fn] = check_vjp(lambda a, fn=fn: pointwise(a, fn), [p],
                             lambda g, a, fn=fn: (pointwise_vjp(g, a, pointwise(a, fn), fn),), rng)
    return errs


@pytest.mark.criterion(1, "gradient suite: primitives <1e-5, five presets <1e-4, 20 seeds, <2 min")
def test_gradient_suite():
    start = time.perf_counter()
    worst_primitive = {}
    for seed in range(20):
        for name, err in primitive_errors(seed).items():
            worst_primitive[name] = max(worst_primitive.get(name, 0.0), err)
    worst_model, failures = {}, []
    for preset in IMAGE_PRESETS:
        for seed in range(20):
            model, x, y = cli.gradcheck_model(preset, "classify", seed)
            report = check_model(model, x, y, Prng(seed).spawn(2), tolerance=1e-4)
            worst_model[preset] = max(worst_model.get(preset, 0.0), report.max_error)
            failures += [(preset, seed) + f for f in report.failures]
    elapsed = time.perf_counter() - start
    print(f"\nprimitives worst: {max(worst_primitive.values()):.2e}; presets worst: "
          + ", ".join(f"{p} {e:.2e}" for p, e in worst_model.items()) + f"; {elapsed:.1f}s")
    assert all(e < 1e-5 for e in worst_primitive.values()), worst_primitive
    assert not failures, failures[:5]
    assert elapsed < 120


@pytest.mark.criterion(2, "reductions: one-hot attention = static conv (1e-12); K=1 = base_cnn (1e-10)")
def test_reductions():
    rng = Prng(0)
    x = rng.normal((3, 2, 7, 7))
    worst = 0.0
    for mode, k in (("soft", 4), ("hard", 4), ("oriented", 2)):
        layer = DynamicConv(2, 3, 3, 1, 1, num_kernels=k, mode=mode, k_active=2, rng=rng)
        layer.params["gen_w2"][...] = 0
        n_logits = layer.params["gen_b2"].size
        for j in range(k):
            layer.params["gen_b2"][...] = -1000.0
            layer.params["gen_b2"][j * n_logits // k] = 1000.0
            out = layer.forward(x, Context())
            ref = conv2d(x, layer.params["bank"][j], ConvSpec.make(1, 1))
            worst = max(worst, float(np.abs(out - ref).max()))
    assert worst <= 1e-12
    for preset in ("local_soft", "hard_attention"):
        for seed in range(5):
            static, dynamic = reduction_pair(preset, seed)
            xs = Prng(seed + 100).normal((4, 1, 8, 8))
            assert np.abs(static.forward(xs) - dynamic.forward(xs)).max() <= 1e-10


@pytest.mark.criterion(3, "channel attention strictly in (0,1) on 1000 inputs; A=1 gate is identity")
def test_channel_attention_contract():
    rng = Prng(1)
    for _ in range(1000):
        c = 1 + rng.integers(6)
        F = rng.normal((1 + rng.integers(3), c, 3, 3), std=10.0)
        A = channel_attention(F, rng.normal((c, c), std=3.0), rng.normal(c))
        assert np.all(A > 0) and np.all(A < 1)
        assert np.array_equal(apply_channel_gate(F, np.ones(F.shape[:2])), F)


@pytest.mark.criterion(4, "k-fold summary: mean 0.571/0.653, population std 0.059/0.062 (+-0.0005)")
def test_kfold_summary():
    cnn = [0.506, 0.564, 0.526, 0.462, 0.654, 0.590, 0.590, 0.551, 0.615, 0.654]
    dcnn = [0.620, 0.692, 0.641, 0.551, 0.667, 0.641, 0.603, 0.615, 0.782, 0.718]
    for accs, (mean_ref, std_ref) in ((cnn, (0.571, 0.059)), (dcnn, (0.653, 0.062))):
        mean, std = kfold_stats([FoldResult(i + 1, 0.0, a) for i, a in enumerate(accs)])
        print(f"\nmean {mean:.4f} std {std:.4f}")
        assert abs(mean - mean_ref) <= 0.0005 and abs(std - std_ref) <= 0.0005


def set_oracle(pred, gt, c):
    total = 0.0
    for k in range(c):
        p = {i for i, v in enumerate(pred.ravel()) if v == k}
        g = {i for i, v in enumerate(gt.ravel()) if v == k}
        total += 1.0 if not (p | g) else len(p & g) / len(p | g)
    return total / c


@pytest.mark.criterion(5, "mIoU equals the set-based oracle on 1000 masks (1e-12); perfect = 1.0")
def test_miou_oracle():
    rng = Prng(2)
    for _ in range(1000):
        c = 2 + rng.integers(4)
        shape = (1 + rng.integers(8), 1 + rng.integers(8))
        pred, gt = rng.integers(c, size=shape), rng.integers(c, size=shape)
        assert abs(miou(pred, gt, c) - set_oracle(pred, gt, c)) <= 1e-12
        assert miou(gt, gt, c) == 1.0


@pytest.mark.criterion(6, "FLOPs: two-layer fixture = 4864; base < global < local <= hard(k=K) <= odconv")
def test_flops():
    from dynconv.metrics import flops_model

    assert flops_model(cli.two_layer_fixture()).total == 4864
    totals = {}
    for preset in IMAGE_PRESETS:
        spec = ModelSpec(preset, num_classes=10, num_kernels=4, k_active=4)
        totals[preset] = flops_model(build_model(spec, Prng(0))).total
    print("\n" + ", ".join(f"{p} {t}" for p, t in totals.items()))
    assert totals["base_cnn"] < totals["global_soft"] < totals["local_soft"]
    assert totals["local_soft"] <= totals["hard_attention"] <= totals["odconv"]


@pytest.mark.criterion(7, "every preset >= 90% train accuracy on oriented bars within 30 epochs, <10 min")
def test_learning_sanity():
    train_set = gen_oriented_bars(50, 16, 4, Prng(11))
    val_set = gen_oriented_bars(10, 16, 4, Prng(12))
    config = TrainConfig()  # lr 0.001, batch 32, 30 epochs, dropout 0.2
    start = time.perf_counter()
    best = {}
    for preset in IMAGE_PRESETS:
        model = build_model(ModelSpec(preset, num_classes=4, precision="float32"), Prng(0))
        log = train(model, (train_set.images, train_set.labels), (val_set.images, val_set.labels), config)
        best[preset] = max(e.train_metric for e in log.epochs)
        if preset == "odconv":
            rotated = rotate_bars_dataset(val_set, 4)
            _, rot_acc = model.evaluate(rotated.images.astype(np.float32), rotated.labels)
            print(f"\nodconv rotated-test accuracy (informational): {rot_acc:.3f}")
    elapsed = time.perf_counter() - start
    print("train accuracy: " + ", ".join(f"{p} {a:.3f}" for p, a in best.items()) + f"; {elapsed:.0f}s")
    assert all(a >= 0.9 for a in best.values()), best
    assert elapsed < 600


@pytest.mark.criterion(8, "callback scenarios: plateau x0.1 after 5, floor 1e-6, stop after 10, strict checkpoints")
def test_callbacks(tmp_path):
    s = CallbackState(current_lr=0.001)
    assert [reduce_lr_on_plateau(s, 1.0) for _ in range(6)][-1] == pytest.approx(1e-4)
    s = CallbackState(current_lr=1e-6)
    assert all(reduce_lr_on_plateau(s, 1.0) == 1e-6 for _ in range(12))
    s = CallbackState(current_lr=0.001)
    assert all(reduce_lr_on_plateau(s, 1.0 - 0.01 * i) == 0.001 for i in range(30))
    s = CallbackState()
    assert [early_stopping(s, 1.0) for _ in range(11)] == [False] * 10 + [True]
    s = CallbackState()
    assert not any(early_stopping(s, v) for v in [1.0] * 9 + [0.5] * 10)
    s = CallbackState()
    assert not any(early_stopping(s, 1.0 / (i + 1)) for i in range(30))
    model = build_model(ModelSpec("base_cnn", input_shape=(1, 8, 8), widths=(4,), depth=1), Prng(0))
    s = CallbackState()
    written = [checkpoint_best(model, a, e + 1, s, str(tmp_path)) for e, a in enumerate([0.5, 0.6, 0.55])]
    assert [w is not None for w in written] == [True, True, False]
    assert len(os.listdir(tmp_path)) == 2


def _snapshot(directory):
    return {name: open(os.path.join(directory, name), "rb").read()
            for name in sorted(os.listdir(directory)) if name.endswith((".csv", ".json", ".idx", ".tsv"))}


def _gen_commands(root):
    return [["gen-data", "oriented-bars", "--per-class", "12", "--seed", "5", "--out", str(root / "bars")],
            ["gen-data", "synth-timeseries", "--classes", "2", "--per-class", "10", "--length", "16",
             "--seed", "5", "--out", str(root / "series")]]


@pytest.mark.criterion(9, "determinism: repeated commands give byte-identical CSV/JSON outputs")
def test_cli_determinism(tmp_path, capsys):
    # the same commands run twice; only the output directories differ
    data, series = tmp_path / "bars", tmp_path / "series"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"preset": "hard_attention", "dataset": str(data), "epochs": 2,
                               "widths": [4, 8, 8], "depth": 1, "kr_dim": 4}))
    kcfg = tmp_path / "kcfg.json"
    kcfg.write_text(json.dumps({"preset": "net2_dcnn", "task": "timeseries", "dataset": str(series),
                                "epochs": 1, "pretrain_epochs": 1, "k": 4}))
    for argv in _gen_commands(tmp_path):
        assert cli.main(argv) == 0
    outputs = []
    for rep in ("a", "b"):
        root = tmp_path / rep
        for argv in _gen_commands(root):
            assert cli.main(argv) == 0
        assert cli.main(["train", "--config", str(cfg), "--out", str(root / "run")]) == 0
        assert cli.main(["kfold", "--config", str(kcfg), "--out", str(root / "kfold")]) == 0
        assert cli.main(["flops", "--preset", "odconv", "--out", str(root / "flops")]) == 0
        assert cli.main(["eval", "--checkpoint", str(root / "run" / "final_model.ckpt"), "--dataset", str(data),
                         "--out", str(root / "eval")]) == 0
        capsys.readouterr()
        outputs.append({sub: _snapshot(root / sub) for sub in ("bars", "series", "run", "kfold", "flops", "eval")})
    assert all(outputs[0][k] for k in outputs[0])
    for sub in outputs[0]:
        assert outputs[0][sub] == outputs[1][sub], sub


@pytest.mark.criterion(10, "odconv uniform attention is 90-degree equivariant on 100 random 5x5 inputs (1e-6)")
def test_orientation_equivariance():
    rng = Prng(3)
    worst = 0.0
    for _ in range(100):
        bank = KernelBank(rng.normal((1, 2, 1, 3, 3)))
        A = np.full(8, 1 / 8)
        x = rng.normal((1, 1, 5, 5))
        lhs = odconv_forward(np.rot90(x, 1, axes=(2, 3)), bank, None, attention=A)
        rhs = np.rot90(odconv_forward(x, bank, None, attention=A), 1, axes=(2, 3))
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    assert worst <= 1e-6
