"""Acceptance gate: one test per criterion, each at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v``; a PASS/FAIL line per criterion
is printed in the terminal summary.
"""

import numpy as np
import pytest
from scipy.stats import spearmanr

from capsprune import tensor as T
from capsprune.bench import bench_forward
from capsprune.capsnet import (
    CapsNetConfig,
    CapsNetModel,
    dynamic_routing,
    forward,
    init_model,
    margin_loss,
    one_hot,
    pc_count,
    reconstruction_loss,
    routing_step,
    squash,
    with_config,
)
from capsprune.data import load_cifar10, load_idx, synth_dataset
from capsprune.flops import flops_pc_transform, flops_routing, reduction_ratio
from capsprune.persist import checkpoint_bytes, emit_curve, parse_checkpoint, read_curve
from capsprune.pruning import (
    PruneRecord,
    apply_prune,
    exact_removal_deltas,
    parse_schedule,
    prune_loop,
    taylor_score_batch,
    taylor_scores,
)
from capsprune.tensor import Tensor, gradcheck
from capsprune.training import loss_and_grads, train
from conftest import as_dtype, small_config

GRAD_TOL = 1e-3


def test_criterion_1_geometry():
    assert (pc_count(28), pc_count(32), pc_count(48)) == (1152, 2048, 8192)


def test_criterion_2_flops():
    assert flops_pc_transform(1152) == 276_480
    assert flops_pc_transform(52) == 12_480
    assert round(reduction_ratio(276_480, 12_480), 5) == 0.95486
    routing_drop = reduction_ratio(flops_routing(1152, 10, 16, 3), flops_routing(52, 10, 16, 3))
    assert 0.952 <= routing_drop <= 0.955


class TestCriterion3Gradients:
    @pytest.fixture
    def rng(self):
        return np.random.Generator(np.random.Philox(3))

    def test_criterion_3_conv(self, rng):
        assert gradcheck(lambda x, k: T.conv2d(x, k, 2), [rng.standard_normal((2, 3, 9, 9)),
                                                          rng.standard_normal((4, 3, 3, 3))]) < GRAD_TOL

    def test_criterion_3_relu(self, rng):
        x = rng.standard_normal((5, 6))
        x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
        assert gradcheck(T.relu, [x]) < GRAD_TOL

    def test_criterion_3_softmax(self, rng):
        assert gradcheck(lambda x: T.softmax(x, axis=-1), [rng.standard_normal((4, 5))]) < GRAD_TOL

    def test_criterion_3_matvec_bank(self, rng):
        assert gradcheck(T.matvec_bank, [rng.standard_normal((4, 3, 5, 2)),
                                         rng.standard_normal((3, 4, 2))]) < GRAD_TOL

    def test_criterion_3_squash(self, rng):
        assert gradcheck(squash, [rng.standard_normal((4, 6, 3))]) < GRAD_TOL

    def test_criterion_3_routing_final_iteration(self, rng):
        b = rng.standard_normal((2, 5, 3))
        assert gradcheck(lambda u: routing_step(u, b)[1], [rng.standard_normal((2, 5, 3, 4))]) < GRAD_TOL

    def test_criterion_3_losses(self, rng):
        cfg = CapsNetConfig()
        labels = [2, 0, 1]
        images = rng.random((3, 8))

        def total(v, decoded):
            return margin_loss(v, one_hot(labels, 3), cfg) + reconstruction_loss(decoded, images) * cfg.recon_weight

        assert gradcheck(total, [rng.standard_normal((3, 3, 4)) * 0.4, rng.random((3, 8))]) < GRAD_TOL


def test_criterion_4_compaction(mnist_model):
    rng = np.random.Generator(np.random.Philox(4))
    images = rng.random((2, 1, 28, 28)).astype(np.float32)
    worst = 0.0
    for _ in range(20):
        n_keep = int(rng.integers(1, 1152))
        keep = np.sort(rng.choice(1152, n_keep, replace=False))
        mask = np.zeros(1152)
        mask[keep] = 1
        masked = forward(mnist_model, images, pc_mask=mask).logits.data
        compact = forward(apply_prune(mnist_model, np.setdiff1d(np.arange(1152), keep)), images).logits.data
        worst = max(worst, float(np.abs(masked - compact).max()))
    print(f"max abs logit difference over 20 survivor sets: {worst:.3e}")
    assert worst <= 1e-5


class TestCriterion5Taylor:
    def test_criterion_5_rank_agreement(self, trained_small, two_class_data):
        model, hist = trained_small
        assert model.n_surviving <= 32 and hist.best_acc > 0.9
        test = two_class_data[1]
        rho = spearmanr(taylor_scores(model, test), exact_removal_deltas(model, test.images, test.labels)).correlation
        exact = exact_removal_deltas(model, test.images, test.labels)
        rho_sample = spearmanr(taylor_scores(model, test, abs_mode="sample"), exact).correlation
        print(f"Spearman(Taylor, exact removal delta) = {rho:.4f} (per-sample abs variant: {rho_sample:.4f})")
        assert rho >= 0.6

    def test_criterion_5_second_order_error(self, trained_small, two_class_data):
        # exact gradients through every routing iteration, in double precision
        model = as_dtype(with_config(trained_small[0], routing_grad="all"), np.float64)
        data = two_class_data[1].subset(np.arange(100))
        x, y = data.images.astype(np.float64), data.labels

        def scaled(i, t):
            w = model.params["transform"].data.copy()
            w[i] *= t
            return CapsNetModel(model.config, dict(model.params, transform=Tensor(w, requires_grad=True)),
                                model.survivors)

        ratios = []
        for i in np.argsort(taylor_scores(model, data, len(data)))[-5:]:
            removed = forward(scaled(i, 0.0), x, y).loss.item()
            errs = []
            for t in (1e-1, 1e-2):
                loss, out = loss_and_grads(scaled(i, t), x, y)
                a = out.pc_activations
                score = taylor_score_batch(a, a.grad * len(y))[i]
                errs.append(abs(abs(loss - removed) - score))
            ratios.append(errs[0] / errs[1])
        print("error ratios t=0.1 / t=0.01:", np.round(ratios, 1))
        assert all(100 / 3 <= r <= 300 for r in ratios)


@pytest.mark.slow
def test_criterion_6_pruning_capacity():
    size = 24
    train_set = synth_dataset(2000, size, 4, seed=1)
    test_set = synth_dataset(500, size, 4, seed=2)
    cfg = CapsNetConfig(image_size=size, conv1_filters=32, conv2_capsule_types=3, num_classes=4,
                        decoder_widths=(64, 128, size * size))
    assert cfg.pc_count == 48
    model, hist = train(init_model(cfg, seed=0), train_set, test_set, 5, seed=0)
    baseline = hist.best_acc
    final, records = prune_loop(model, train_set, test_set, parse_schedule("8:8,2:4", finetune_epochs=4), "taylor")
    kept = final.n_surviving / cfg.pc_count
    print(f"baseline {baseline:.4f}; " + ", ".join(f"{r.n_remaining}: {r.best_accuracy:.4f}" for r in records))
    assert baseline >= 0.95
    assert kept <= 0.10
    assert records[-1].best_accuracy >= baseline - 0.015


@pytest.mark.slow
def test_criterion_7_latency(mnist_model):
    rng = np.random.Generator(np.random.Philox(7))
    images = rng.random((100, 1, 28, 28)).astype(np.float32)
    medians = {}
    for n in (1152, 576, 288, 115, 52):
        drop = np.sort(rng.choice(1152, 1152 - n, replace=False))
        medians[n] = bench_forward(apply_prune(mnist_model, drop), images, repeats=5).median_s
    print("median seconds:", {k: round(v, 4) for k, v in medians.items()})
    times = list(medians.values())
    assert all(b <= a for a, b in zip(times, times[1:]))
    assert medians[52] < 0.5 * medians[1152]


def test_criterion_8_invariants():
    rng = np.random.Generator(np.random.Philox(8))
    u_hat = Tensor(rng.standard_normal((1000, 6, 10, 4)) * rng.uniform(0, 10, (1000, 1, 1, 1)))
    state = dynamic_routing(u_hat, 3)
    for c in state.coupling_history:
        assert np.abs(c.sum(axis=2) - 1).max() <= 1e-6
    assert np.linalg.norm(state.output.data, axis=-1).max() < 1
    v = np.zeros((1, 10, 16))
    v[0, :, 0] = 0.1
    v[0, 4, 0] = 0.9
    assert margin_loss(Tensor(v), one_hot([4], 10), CapsNetConfig()).item() == 0.0


def test_criterion_9_formats(tmp_path, mnist_model):
    pruned = apply_prune(mnist_model, np.arange(0, 1100))
    for m in (mnist_model, pruned):
        back, _ = parse_checkpoint(checkpoint_bytes(m))
        assert back.survivors.tolist() == m.survivors.tolist()
        assert all(back.params[k].data.tobytes() == m.params[k].data.tobytes() for k in m.params)
    assert pruned.n_surviving == 52

    (tmp_path / "i").write_bytes(bytes([0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2,
                                        0, 255, 0, 255, 255, 0, 255, 0]))
    (tmp_path / "l").write_bytes(bytes([0, 0, 8, 1, 0, 0, 0, 2, 3, 7]))
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_array_equal(ds.images, np.array([[[[0, 1], [0, 1]]], [[[1, 0], [1, 0]]]], np.float32))
    np.testing.assert_array_equal(ds.labels, [3, 7])

    (tmp_path / "c.bin").write_bytes(bytes([9, 255]) + bytes(3071))
    cifar = load_cifar10([tmp_path / "c.bin"])
    expect = np.zeros((1, 3, 32, 32), np.float32)
    expect[0, 0, 0, 0] = 1.0
    np.testing.assert_array_equal(cifar.images, expect)
    assert cifar.labels.tolist() == [9]

    recs = [PruneRecord(152, 0.987654321, 36_480, 123, 2.5), PruneRecord(52, 0.1 + 0.2, 12_480, 45, 1e-3)]
    emit_curve(recs, tmp_path / "a.csv")
    emit_curve(read_curve(tmp_path / "a.csv"), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
