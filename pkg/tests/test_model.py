import math

import numpy as np
import pytest

from duplexlm import vocab
from duplexlm.model import (
    AlignmentError,
    DuplexModel,
    LengthError,
    ModelConfig,
    layout_sequence,
)
from duplexlm.tensor import ContractError, Tensor

TINY = dict(n_blocks=1, n_heads=2, d_model=8, d_ff=16, max_seq_len=64, d_enc=8)


def tiny_model(fusion="middle", seed=0, **kw):
    args = {**TINY, **kw}
    return DuplexModel(ModelConfig(fusion=fusion, seed=seed, **args))


def zero_listen(model, T):
    return Tensor(np.zeros((T, model.config.d_model), dtype=np.float32))


# -- layout -------------------------------------------------------------------


def test_layout_basic():
    l = layout_sequence([0, 1], [5, 9], max_seq_len=32)
    boc = vocab.BOC + vocab.CTX_OFFSET
    eoc = vocab.EOC + vocab.CTX_OFFSET
    assert l.input_ids.tolist() == [boc, 0 + vocab.CTX_OFFSET, 1 + vocab.CTX_OFFSET, eoc, vocab.BOS, 5, 9]
    assert l.targets[l.mask].tolist() == [5, 9, vocab.EOS]
    assert l.prefix_len == 5


def test_layout_empty_speak():
    l = layout_sequence([0], [], max_seq_len=32)
    assert l.targets[l.mask].tolist() == [vocab.EOS]


def test_layout_length_boundary():
    # prefix is len(ctx)+3; max context for max_seq_len=32 with no speak is 29
    layout_sequence([0] * 29, [], max_seq_len=32)
    with pytest.raises(LengthError):
        layout_sequence([0] * 30, [], max_seq_len=32)


def test_layout_irq_terminal():
    l = layout_sequence([0], [1, 2], max_seq_len=32, terminal=vocab.IRQ)
    assert l.targets[l.mask].tolist() == [1, 2, vocab.IRQ]


# -- listener encoder ---------------------------------------------------------


def test_encode_listen_causal_prefix():
    m = tiny_model()
    a = np.array([0, 1, 2, 3, 4, 5, 6, 7])
    b = a.copy()
    b[5:] = [9, 10, 11]
    fa = m.encode_listen(a).data
    fb = m.encode_listen(b).data
    assert np.array_equal(fa[:5], fb[:5])
    assert not np.array_equal(fa[5:], fb[5:])


def test_encode_listen_constant_suffix_on_silence():
    m = tiny_model()
    f = m.encode_listen(np.zeros(20, dtype=int)).data
    rf = m.receptive_field
    for t in range(rf, 20):
        assert np.allclose(f[t], f[rf - 1], atol=1e-6)


def test_encode_listen_shapes_and_oov():
    m = tiny_model()
    assert m.encode_listen([3]).data.shape == (1, m.config.d_enc)
    with pytest.raises(IndexError):
        m.encode_listen([vocab.V_LISTEN])


def test_project_listen():
    m = tiny_model()
    f = m.encode_listen([0, 1, 2])
    p = m.project_listen(f)
    assert p.data.shape == (3, m.config.d_model)
    m.params["listen.proj.w"].data[...] = 0
    m.params["listen.proj.b"].data[...] = 0
    p0 = m.project_listen(f)
    assert np.all(p0.data == 0)


def test_align_listen_positions():
    m = tiny_model()
    l = layout_sequence([0, 1], [5, 9], max_seq_len=32)  # 3 prediction steps
    frames = Tensor(np.arange(5 * 8, dtype=np.float32).reshape(5, 8) + 1.0)
    aligned = m.align_listen(frames, l)
    assert aligned.data.shape == (7, 8)
    # context prefix gets exact zeros; frames 0..2 land at positions 4..6
    assert np.all(aligned.data[:4] == 0)
    assert np.array_equal(aligned.data[4:], frames.data[:3])


def test_align_listen_too_short():
    m = tiny_model()
    l = layout_sequence([0, 1], [5, 9], max_seq_len=32)
    with pytest.raises(AlignmentError):
        m.align_listen(Tensor(np.zeros((2, 8), dtype=np.float32)), l)


# -- forward ------------------------------------------------------------------


@pytest.mark.parametrize("fusion", ["early", "middle", "late"])
def test_zero_listen_equivalence(fusion):
    m = tiny_model(fusion)
    if fusion == "late":
        m.params["listen.latehead.w"].data[...] = 0
        m.params["listen.latehead.b"].data[...] = 0
    rng = np.random.default_rng(0)
    for _ in range(5):
        l = layout_sequence(rng.integers(0, 26, size=4), rng.integers(0, 64, size=6), 64)
        vanilla = m.forward(l.input_ids).data
        fused = m.forward(l.input_ids, zero_listen(m, len(l.input_ids))).data
        assert np.array_equal(vanilla, fused)


def test_forward_shapes():
    m = tiny_model()
    l = layout_sequence([0, 1, 2], [1, 2, 3], 64)
    out = m.forward(l.input_ids)
    assert out.data.shape == (len(l.input_ids), vocab.V_SPEAK)


@pytest.mark.parametrize("fusion", ["early", "middle", "late"])
def test_listening_causality(fusion):
    """Perturbing listening frame t leaves predictions for steps <= t
    unchanged (the frame joins the input at the query position for step
    t+1)."""
    m = tiny_model(fusion, seed=3)
    rng = np.random.default_rng(1)
    l = layout_sequence(rng.integers(0, 26, size=5), rng.integers(0, 64, size=10), 64)
    T = len(l.input_ids)
    stream = rng.integers(0, vocab.V_LISTEN, size=16)
    base = m.forward(
        l.input_ids, m.align_listen(m.project_listen(m.encode_listen(stream)), l)
    ).data
    for t in [0, 3, 7, 10]:
        pert = stream.copy()
        pert[t] = (pert[t] + 1) % vocab.V_LISTEN
        out = m.forward(
            l.input_ids, m.align_listen(m.project_listen(m.encode_listen(pert)), l)
        ).data
        qpos = l.prefix_len - 1 + t  # query position where frame t is injected
        assert np.array_equal(base[:qpos], out[:qpos])


def test_token_causality():
    m = tiny_model()
    rng = np.random.default_rng(2)
    l = layout_sequence(rng.integers(0, 26, size=5), rng.integers(0, 64, size=8), 64)
    base = m.forward(l.input_ids).data
    for p in [2, 6, 10]:
        ids = l.input_ids.copy()
        ids[p] = (ids[p] + 1) % vocab.N_AUDIO
        out = m.forward(ids).data
        assert np.array_equal(base[:p], out[:p])
        assert not np.array_equal(base[p:], out[p:])


def test_forward_length_error():
    m = tiny_model()
    with pytest.raises(LengthError):
        m.forward(np.zeros(65, dtype=int))


# -- losses -------------------------------------------------------------------


def test_tts_loss_uniform_model():
    m = tiny_model()
    for name, p in m.params.items():
        p.data[...] = 0.0
    ctx = [0, 1]
    spk = [3, 4, 5]
    loss = m.tts_loss([(ctx, spk)])
    assert abs(loss.item() - 4 * math.log(vocab.V_SPEAK)) < 1e-4


def test_tts_loss_additive_over_duplicates():
    m = tiny_model()
    one = m.tts_loss([([0, 1, 2], [3, 4])]).item()
    two = m.tts_loss([([0, 1, 2], [3, 4]), ([0, 1, 2], [3, 4])]).item()
    assert abs(two - 2 * one) < 1e-4


def test_fdm_loss_term_counts():
    m = tiny_model()
    for name, p in m.params.items():
        p.data[...] = 0.0
    ctx = list(range(5))
    spk = list(range(12))
    stream = [0] * 40
    # interrupted with 7 region tokens + IRQ -> 8 terms
    loss_i = m.fdm_loss([(ctx, spk[:7], stream, vocab.IRQ)]).item()
    assert abs(loss_i - 8 * math.log(vocab.V_SPEAK)) < 1e-4
    # non-interrupted: 12 tokens + EOS -> 13 terms
    loss_n = m.fdm_loss([(ctx, spk, stream, vocab.EOS)]).item()
    assert abs(loss_n - 13 * math.log(vocab.V_SPEAK)) < 1e-4
    # mixed batch is the sum
    both = m.fdm_loss(
        [(ctx, spk[:7], stream, vocab.IRQ), (ctx, spk, stream, vocab.EOS)]
    ).item()
    assert abs(both - (loss_i + loss_n)) < 1e-4


def test_fdm_loss_short_stream_rejected():
    m = tiny_model()
    with pytest.raises(AlignmentError):
        m.fdm_loss([([0, 1], [1, 2, 3], [0, 0], vocab.EOS)])


def test_fdm_loss_gradient_check():
    """End-to-end finite differences on a tiny config, float64."""
    m = tiny_model("middle", seed=5)
    for name, p in m.params.items():
        p.data = p.data.astype(np.float64)
    batch = [([0, 1, 2], [1, 2, 3, 4], [0, 1, 9, 0, 0, 0, 0, 0], vocab.IRQ)]

    def loss_fn():
        return m.fdm_loss(batch)

    m.params.zero_grads()
    loss_fn().backward()
    step = 1e-4
    rng = np.random.default_rng(0)
    checked = 0
    for name in [
        "speak.tok_emb",
        "speak.block0.attn.wqkv",
        "speak.block0.mlp.w1",
        "speak.head.w",
        "listen.emb",
        "listen.conv0.w",
        "listen.proj.w",
    ]:
        p = m.params[name]
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        idxs = rng.choice(flat.size, size=min(8, flat.size), replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn().item()
            flat[i] = orig - step
            lo = loss_fn().item()
            flat[i] = orig
            fd = (hi - lo) / (2 * step)
            denom = max(abs(fd), abs(gflat[i]), 1e-4)
            assert abs(fd - gflat[i]) / denom < 1e-2, (name, i, fd, gflat[i])
            checked += 1
    assert checked > 40


def test_param_groups_partition():
    m = tiny_model("late")
    names = set(m.params.names())
    speak = set(m.speaking_params().names())
    listen = set(m.listening_params().names())
    assert speak | listen == names
    assert not (speak & listen)
    assert "listen.latehead.w" in listen


def test_checkpoint_roundtrip(tmp_path):
    m = tiny_model("early", seed=9)
    path = tmp_path / "m.ckpt"
    m.save(path)
    back = DuplexModel.load(path)
    assert back.config == m.config
    assert back.params.state_bytes() == m.params.state_bytes()
    l = layout_sequence([0, 1], [5], 64)
    assert np.array_equal(m.forward(l.input_ids).data, back.forward(l.input_ids).data)
