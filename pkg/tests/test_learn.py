import numpy as np
import pytest

from pfnet.gradcheck import DEFAULT_TOL, check_gradients
from pfnet.learn import (
    SgdMomentum,
    TrainConfig,
    TrainingAborted,
    bce_loss,
    ce_loss,
    edge_map,
    edge_targets_from_mask,
    poly_lr,
    train_run,
    train_step,
)
from pfnet.network import NetworkConfig, init_params
from pfnet.pointflow import PfmConfig
from pfnet.tensor import Tensor


def rand(shape, seed, lo=-1.0, hi=1.0):
    return np.random.Generator(np.random.PCG64(seed)).uniform(lo, hi, shape)


def tiny_cfg(**kw):
    base = dict(
        input_size=(32, 32),
        num_classes=3,
        fpn_channels=8,
        backbone_channels=(4, 6, 8, 12),
        ppm_bins=(1,),
        pfm={gap: PfmConfig(channels=8, salient_kernel=(2, 2), boundary_k=2) for gap in (3, 4, 5)},
    )
    base.update(kw)
    return NetworkConfig(**base)


def tiny_crops(count, seed, size=32, classes=3):
    rng = np.random.Generator(np.random.PCG64(seed))
    crops = []
    for _ in range(count):
        img = rng.random((3, size, size)).astype(np.float32)
        mask = np.zeros((size, size), dtype=np.uint8)
        # one small rectangle per crop so CE has signal
        r, c = rng.integers(4, size - 8, 2)
        mask[r : r + 5, c : c + 5] = rng.integers(1, classes)
        crops.append((img, mask))
    return crops


# ---------------------------------------------------------------------------
# edge targets


def test_edge_targets_constant_mask_all_zero():
    targets = edge_targets_from_mask(np.zeros((64, 64), dtype=np.uint8))
    for s, t in targets.items():
        assert t.shape == (64 // s, 64 // s)
        assert np.all(t == 0.0)


def test_edge_targets_halved_mask_band_width():
    mask = np.zeros((64, 64), dtype=np.uint8)
    mask[:, 32:] = 1
    edges = edge_map(mask, radius=1)
    cols = np.nonzero(edges.any(axis=0))[0]
    # label change at columns 31|32, dilated by 1 -> band of width 2 * radius + 2
    assert cols.tolist() == [30, 31, 32, 33]


def test_edge_map_matches_bruteforce_oracle():
    rng = np.random.Generator(np.random.PCG64(5))
    for _ in range(20):
        mask = rng.integers(0, 4, (16, 16))
        got = edge_map(mask, radius=0)
        oracle = np.zeros((16, 16), dtype=bool)
        for i in range(16):
            for j in range(16):
                for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    ni, nj = i + di, j + dj
                    if 0 <= ni < 16 and 0 <= nj < 16 and mask[ni, nj] != mask[i, j]:
                        oracle[i, j] = True
        assert np.array_equal(got, oracle)


def test_edge_targets_or_pooling_matches_oracle():
    rng = np.random.Generator(np.random.PCG64(6))
    mask = rng.integers(0, 3, (16, 16))
    targets = edge_targets_from_mask(mask, radius=1, strides=(8, 16))
    edges = edge_map(mask, radius=1)
    for s in (8, 16):
        for bi in range(16 // s):
            for bj in range(16 // s):
                block = edges[bi * s : (bi + 1) * s, bj * s : (bj + 1) * s]
                assert targets[s][bi, bj] == float(block.any())


def test_edge_targets_reject_empty():
    with pytest.raises(ValueError):
        edge_targets_from_mask(np.zeros((0, 0)))


# ---------------------------------------------------------------------------
# losses


def test_bce_perfect_prediction_near_zero():
    target = np.array([[0.0, 1.0], [1.0, 0.0]])
    pred = Tensor(target.copy())
    assert float(bce_loss(pred, target).data) < 1e-6


def test_bce_uniform_prediction_is_ln2():
    pred = Tensor(np.full((4, 4), 0.5))
    assert float(bce_loss(pred, np.ones((4, 4))).data) == pytest.approx(
        0.6931471805599453, abs=1e-12
    )


def test_bce_single_pixel_reference():
    # -ln 0.8 evaluated independently: 0.22314355131420976
    loss = bce_loss(Tensor(np.array([0.8])), np.array([1.0]))
    assert float(loss.data) == pytest.approx(0.22314355131420976, abs=1e-12)


def test_bce_shape_mismatch():
    with pytest.raises(ValueError):
        bce_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 3)))


def test_ce_uniform_two_class_is_ln2():
    logits = Tensor(np.zeros((1, 2, 3, 3)))
    mask = np.zeros((1, 3, 3), dtype=np.int64)
    assert float(ce_loss(logits, mask).data) == pytest.approx(0.6931471805599453, abs=1e-12)


def test_ce_confident_prediction_near_zero():
    logits_data = np.zeros((1, 2, 2, 2))
    logits_data[:, 1] = 100.0
    mask = np.ones((1, 2, 2), dtype=np.int64)
    assert float(ce_loss(Tensor(logits_data), mask).data) < 1e-6


def test_ce_three_class_reference():
    # softmax([1,2,3]) true class 2 -> loss = log(1 + e^-1 + e^-2) = 0.40760596444438064
    logits = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1))
    mask = np.full((1, 1, 1), 2, dtype=np.int64)
    assert float(ce_loss(logits, mask).data) == pytest.approx(0.40760596444438064, abs=1e-12)


def test_ce_ignore_label():
    logits = Tensor(rand((1, 3, 2, 2), 7))
    mask = np.full((1, 2, 2), 255, dtype=np.int64)
    mask[0, 0, 0] = 1
    full = ce_loss(logits, mask)
    only = ce_loss(Tensor(logits.data[:, :, :1, :1]), mask[:, :1, :1])
    assert float(full.data) == pytest.approx(float(only.data), abs=1e-12)
    with pytest.raises(ValueError):
        ce_loss(logits, np.full((1, 2, 2), 255, dtype=np.int64))


def test_ce_rejects_bad_labels():
    with pytest.raises(ValueError):
        ce_loss(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 5, dtype=np.int64))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_bce_gradients(seed):
    pred = Tensor(rand((2, 1, 4, 4), seed, 0.05, 0.95), requires_grad=True)
    target = (rand((2, 1, 4, 4), seed + 9) > 0).astype(np.float64)

    def build():
        return bce_loss(pred, target)

    assert check_gradients(build, [pred]) < DEFAULT_TOL


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ce_gradients(seed):
    logits = Tensor(rand((2, 3, 4, 4), seed), requires_grad=True)
    mask = np.random.Generator(np.random.PCG64(seed + 3)).integers(0, 3, (2, 4, 4))
    mask[0, 0, 0] = 255  # exercise the ignore path

    def build():
        return ce_loss(logits, mask)

    assert check_gradients(build, [logits]) < DEFAULT_TOL


# ---------------------------------------------------------------------------
# schedule and optimizer


def test_poly_lr_endpoints():
    assert poly_lr(0.01, 0, 100) == pytest.approx(0.01)
    assert poly_lr(0.01, 100, 100) == 0.0


def test_poly_lr_matches_formula():
    for it in (1, 37, 99):
        assert poly_lr(0.05, it, 100, 0.9) == pytest.approx(0.05 * (1 - it / 100) ** 0.9)


def test_sgd_momentum_hand_recurrence():
    # p0 = 1, loss = p^2 -> grad 2p; momentum 0.9, wd 0.1, lr 0.5
    from pfnet.network import ParameterSet

    p = Tensor(np.array(1.0), requires_grad=True)
    params = ParameterSet({"p": p})
    opt = SgdMomentum(momentum=0.9, weight_decay=0.1)

    p.grad = np.array(2.0)  # grad of p^2 at p=1
    params = opt.step(params, lr=0.5)
    v1 = 2.0 + 0.1 * 1.0
    p1 = 1.0 - 0.5 * v1
    assert float(params["p"].data) == pytest.approx(p1, abs=1e-12)

    params["p"].grad = np.array(2.0 * p1)
    params = opt.step(params, lr=0.5)
    v2 = 0.9 * v1 + (2.0 * p1 + 0.1 * p1)
    p2 = p1 - 0.5 * v2
    assert float(params["p"].data) == pytest.approx(p2, abs=1e-12)


# ---------------------------------------------------------------------------
# training loop


def test_train_step_runs_and_reports():
    cfg = tiny_cfg()
    params = init_params(cfg, 0)
    opt = SgdMomentum()
    batch = tiny_crops(2, 1)
    new_params, stats = train_step(params, opt, batch, cfg, TrainConfig(batch_size=2), 0, 10)
    assert set(stats) == {"lr", "ce", "bce_total", "total"}
    assert stats["lr"] == pytest.approx(0.01)
    assert np.isfinite(stats["total"])
    assert any(
        not np.array_equal(new_params[n].data, params[n].data) for n in params
    )


def test_loss_decreases_over_first_iterations():
    finals, initials = [], []
    for seed in (0, 1, 2):
        cfg = tiny_cfg()
        tc = TrainConfig(epochs=13, batch_size=4, seed=seed, augment=False)
        crops = tiny_crops(16, 100 + seed)
        losses = []
        train_run(crops, cfg, tc, on_log=lambda it, s: losses.append(s["total"]))
        initials.append(np.mean(losses[:5]))
        finals.append(np.mean(losses[45:52]))
    assert np.median(finals) < np.median(initials)


def test_boundary_supervision_off_zeroes_only_boundary_grads():
    cfg = tiny_cfg()
    params = init_params(cfg, 2, dtype=np.float64)
    opt = SgdMomentum(momentum=0.0, weight_decay=0.0)
    batch = tiny_crops(2, 3)
    tc = TrainConfig(batch_size=2, bce_weight=0.0)
    before = {n: params[n].data.copy() for n in params}
    new_params, _ = train_step(params, opt, batch, cfg, tc, 0, 10)
    for gap in (3, 4, 5):
        for suffix in ("weight", "bias"):
            name = f"pfm.gap{gap}.boundary.conv.{suffix}"
            assert np.array_equal(new_params[name].data, before[name]), name
    assert not np.array_equal(
        new_params["pfm.gap3.saliency.conv.weight"].data,
        before["pfm.gap3.saliency.conv.weight"],
    )


def test_training_bitwise_reproducible():
    def run():
        cfg = tiny_cfg()
        tc = TrainConfig(epochs=2, batch_size=4, seed=7)
        params = train_run(tiny_crops(8, 11), cfg, tc)
        return b"".join(params[n].data.tobytes() for n in sorted(params))

    assert run() == run()


def test_non_finite_loss_aborts_with_iteration():
    cfg = tiny_cfg()
    params = init_params(cfg, 4)
    params["head.classifier.weight"] = Tensor(
        np.full(params["head.classifier.weight"].shape, 1e38, dtype=np.float32),
        requires_grad=True,
    )
    opt = SgdMomentum()
    with pytest.raises(TrainingAborted) as err:
        train_step(params, opt, tiny_crops(2, 5), cfg, TrainConfig(batch_size=2), 3, 10)
    assert err.value.iteration == 3
