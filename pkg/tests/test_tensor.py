import math

import numpy as np
import pytest

from duplexlm import tensor as T
from duplexlm.params import ParamStore, load_checkpoint, save_checkpoint
from duplexlm.optim import AdamW, clip_grad_norm
from duplexlm.tensor import (
    ContractError,
    ShapeError,
    Tensor,
    cross_entropy_with_logits,
    layer_norm,
    matmul,
    softmax_lastdim,
)


def finite_diff(fn, tensors, step=1e-3):
    """Central-difference gradients of a scalar fn w.r.t. each tensor.

    Evaluates in the tensors' own dtype; tests pass float64 leaves so the
    oracle noise stays well under the 1e-3 tolerance.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn().item()
            flat[i] = orig - step
            lo = fn().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def rel_err(a, b):
    na = np.linalg.norm(a.reshape(-1))
    nb = np.linalg.norm(b.reshape(-1))
    return np.linalg.norm((a - b).reshape(-1)) / max(na, nb, 1e-12)


def rand64(rng, *shape):
    return Tensor(rng.uniform(-1, 1, size=shape), requires_grad=True, dtype=np.float64)


# -- matmul -------------------------------------------------------------------


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 3)).astype(np.float32)
    out = matmul(Tensor(np.eye(3, dtype=np.float32)), Tensor(a))
    assert np.allclose(out.data, a)


def test_matmul_hand():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    assert out.data.tolist() == [[2.0], [4.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_grad_matches_finite_differences():
    rng = np.random.default_rng(1)
    a = rand64(rng, 4, 3)
    b = rand64(rng, 3, 5)

    def fn():
        return matmul(a, b).sum()

    loss = fn()
    loss.backward()
    fd_a, fd_b = finite_diff(fn, [a, b])
    assert rel_err(a.grad, fd_a) < 1e-3
    assert rel_err(b.grad, fd_b) < 1e-3
    # grad w.r.t. a of sum(a @ b) is the row-broadcast of b's column sums
    assert np.allclose(a.grad, np.broadcast_to(b.data.sum(axis=1), (4, 3)))


# -- softmax ------------------------------------------------------------------


def test_softmax_symmetry():
    out = softmax_lastdim(Tensor([0.0, 0.0]))
    assert np.allclose(out.data, [0.5, 0.5])


def test_softmax_large_logit_stable():
    out = softmax_lastdim(Tensor([1000.0, 0.0]))
    assert np.all(np.isfinite(out.data))
    assert out.data[0] > 0.999999


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(2)
    out = softmax_lastdim(Tensor(rng.standard_normal((4, 7)).astype(np.float32)))
    assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(out.data >= 0) and np.all(out.data <= 1)


@pytest.mark.parametrize("trial", range(20))
def test_softmax_grad_trials(trial):
    rng = np.random.default_rng(100 + trial)
    x = rand64(rng, 3, 5)
    w = rng.uniform(-1, 1, size=(3, 5))

    def fn():
        return (softmax_lastdim(x) * Tensor(w, dtype=np.float64)).sum()

    loss = fn()
    loss.backward()
    (fd,) = finite_diff(fn, [x])
    assert rel_err(x.grad, fd) < 1e-3


# -- layer norm ---------------------------------------------------------------


def test_layer_norm_constant_slice_zero():
    g = Tensor(np.ones(4, dtype=np.float32))
    b = Tensor(np.zeros(4, dtype=np.float32))
    out = layer_norm(Tensor([[3.0, 3.0, 3.0, 3.0]]), g, b)
    assert np.allclose(out.data, 0.0, atol=1e-4)


def test_layer_norm_hand_values():
    g = Tensor(np.ones(3, dtype=np.float32))
    b = Tensor(np.zeros(3, dtype=np.float32))
    out = layer_norm(Tensor([1.0, 2.0, 3.0]), g, b)
    assert np.allclose(out.data, [-1.2247, 0.0, 1.2247], atol=1e-3)


def test_layer_norm_normalizes_random_slices():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((6, 9)).astype(np.float32) * 3 + 1)
    g = Tensor(np.ones(9, dtype=np.float32))
    b = Tensor(np.zeros(9, dtype=np.float32))
    out = layer_norm(x, g, b)
    assert np.allclose(out.data.mean(axis=-1), 0.0, atol=1e-4)
    assert np.allclose(out.data.var(axis=-1), 1.0, atol=1e-4)


def test_layer_norm_grad():
    rng = np.random.default_rng(4)
    x = rand64(rng, 2, 5)
    g = rand64(rng, 5)
    b = rand64(rng, 5)
    w = rng.uniform(-1, 1, size=(2, 5))

    def fn():
        return (layer_norm(x, g, b) * Tensor(w, dtype=np.float64)).sum()

    fn().backward()
    fd_x, fd_g, fd_b = finite_diff(fn, [x, g, b])
    assert rel_err(x.grad, fd_x) < 1e-3
    assert rel_err(g.grad, fd_g) < 1e-3
    assert rel_err(b.grad, fd_b) < 1e-3


# -- cross entropy ------------------------------------------------------------


def test_ce_confident_prediction_near_zero():
    logits = np.zeros((3, 4), dtype=np.float32)
    targets = [1, 2, 0]
    for i, t in enumerate(targets):
        logits[i, t] = 20.0
    loss = cross_entropy_with_logits(Tensor(logits), targets, [True] * 3)
    assert loss.item() < 3e-6


def test_ce_uniform_logits():
    loss = cross_entropy_with_logits(
        Tensor(np.zeros((2, 4), dtype=np.float32)), [0, 3], [True, True]
    )
    assert abs(loss.item() - 2 * math.log(4)) < 1e-5


def test_ce_all_false_mask_is_zero_with_zero_grads():
    logits = Tensor(np.random.default_rng(5).standard_normal((3, 4)).astype(np.float32), requires_grad=True)
    loss = cross_entropy_with_logits(logits, [0, 1, 2], [False] * 3)
    assert loss.item() == 0.0
    loss.backward()
    assert np.all(logits.grad == 0)


def test_ce_target_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy_with_logits(Tensor(np.zeros((1, 4))), [4], [True])


def test_ce_grad():
    rng = np.random.default_rng(6)
    x = rand64(rng, 4, 5)

    def fn():
        return cross_entropy_with_logits(x, [0, 2, 4, 1], [True, True, False, True])

    fn().backward()
    (fd,) = finite_diff(fn, [x])
    assert rel_err(x.grad, fd) < 1e-3


# -- backward mechanics -------------------------------------------------------


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3), dtype=np.float32))


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_unreachable_param_untouched():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    x.sum().backward()
    assert y.grad is None


def test_backward_accumulates_across_calls():
    x = Tensor(np.ones(3), requires_grad=True)
    x.sum().backward()
    x.sum().backward()
    assert np.allclose(x.grad, 2.0)


@pytest.mark.parametrize("trial", range(20))
def test_mlp_grad_matches_finite_differences(trial):
    rng = np.random.default_rng(200 + trial)
    x = rand64(rng, 3, 4)
    w1 = rand64(rng, 4, 6)
    b1 = rand64(rng, 6)
    w2 = rand64(rng, 6, 2)

    def fn():
        h = T.tanh(matmul(x, w1) + b1)
        out = matmul(h, w2)
        return (out * out).sum()

    fn().backward()
    fds = finite_diff(fn, [x, w1, b1, w2])
    for p, fd in zip([x, w1, b1, w2], fds):
        assert rel_err(p.grad, fd) < 1e-3


# -- adamw --------------------------------------------------------------------


def _store_with(value):
    ps = ParamStore()
    ps.add("p", Tensor(np.asarray(value, dtype=np.float32), requires_grad=True))
    return ps


def test_adamw_zero_grad_no_motion():
    ps = _store_with([1.0, -2.0])
    opt = AdamW(ps, lr=0.1, weight_decay=0.0)
    ps["p"].grad = np.zeros(2, dtype=np.float32)
    opt.step()
    assert np.array_equal(ps["p"].data, np.asarray([1.0, -2.0], dtype=np.float32))


def test_adamw_first_step_is_minus_lr():
    # bias-corrected mhat/sqrt(vhat) is exactly 1 for a constant unit gradient
    ps = _store_with([0.5])
    opt = AdamW(ps, lr=0.01, eps=0.0)
    ps["p"].grad = np.ones(1, dtype=np.float32)
    opt.step()
    assert abs(ps["p"].data[0] - (0.5 - 0.01)) < 1e-7


def test_adamw_decoupled_weight_decay():
    ps = _store_with([2.0])
    opt = AdamW(ps, lr=0.1, weight_decay=0.5)
    ps["p"].grad = np.zeros(1, dtype=np.float32)
    opt.step()
    assert abs(ps["p"].data[0] - (2.0 - 0.1 * 0.5 * 2.0)) < 1e-6


def test_adamw_missing_grad_errors():
    ps = _store_with([1.0])
    opt = AdamW(ps)
    with pytest.raises(ContractError):
        opt.step()


def test_clip_grad_norm():
    ps = _store_with([3.0, 4.0])
    ps["p"].grad = np.asarray([3.0, 4.0], dtype=np.float32)
    norm = clip_grad_norm(ps, 1.0)
    assert abs(norm - 5.0) < 1e-6
    assert abs(np.linalg.norm(ps["p"].grad) - 1.0) < 1e-6


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(7)
    ps = ParamStore()
    ps.add("a.w", Tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True))
    ps.add("a.b", Tensor(rng.standard_normal(4).astype(np.float32), requires_grad=True))
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, ps, meta={"note": "test"})
    loaded, meta = load_checkpoint(path)
    assert meta["note"] == "test"
    assert loaded.names() == ps.names()
    assert loaded.state_bytes() == ps.state_bytes()


def test_nan_rejected():
    with pytest.raises(ValueError):
        Tensor([float("nan")])


def test_fixed_seed_bitwise_repeatable():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.standard_normal((8, 8)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.standard_normal((8, 8)).astype(np.float32), requires_grad=True)
        loss = (T.relu(matmul(x, w))).sum()
        loss.backward()
        return x.grad.tobytes(), loss.data.tobytes()

    assert run() == run()
