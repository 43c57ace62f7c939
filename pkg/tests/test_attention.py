import math

import numpy as np
import pytest
import torch

from grad_utils import fd_check
from posekit.attention import (
    Decoder,
    DecoderLayer,
    Encoder,
    EncoderBlock,
    SwiGLU,
    TokenSequence,
    attention,
    decoder_forward,
    encoder_forward,
    rope2d_apply,
    rope3d_apply,
    swiglu_ffn,
    swiglu_hidden,
)
from posekit.errors import ShapeMismatchError
from posekit.features import PatchDescriptorGrid


# --- independent rotation-matrix oracles ------------------------------------


def rope3d_matrix(coords, d):
    """Explicit block-diagonal rotation for one coordinate triple."""
    R = np.eye(d)
    x, y, z = coords
    for k in range(d // 6):  # zero-based; paper-style index is k+1
        freq = math.pi * 10000.0 ** (-2.0 * k / d)
        for plane, t in enumerate((x, y, z)):
            a = freq * t
            i = 6 * k + 2 * plane
            R[i : i + 2, i : i + 2] = [
                [math.cos(a), -math.sin(a)],
                [math.sin(a), math.cos(a)],
            ]
    return R


def rope2d_matrix(coords, d):
    R = np.eye(d)
    row, col = coords
    half_planes = d // 4
    for j in range(d // 2):
        k = j % half_planes
        freq = 10000.0 ** (-2.0 * k / (d / 2.0))
        a = freq * (row if j < half_planes else col)
        i = 2 * j
        R[i : i + 2, i : i + 2] = [
            [math.cos(a), -math.sin(a)],
            [math.sin(a), math.cos(a)],
        ]
    return R


def test_rope3d_matches_matrix_oracle():
    rng = np.random.default_rng(0)
    d = 12
    for _ in range(20):
        v = rng.standard_normal(d)
        c = rng.uniform(0, 1, 3)
        out = rope3d_apply(
            torch.tensor(v[None], dtype=torch.float64),
            torch.tensor(c[None], dtype=torch.float64),
        ).numpy()[0]
        assert np.abs(out - rope3d_matrix(c, d) @ v).max() < 1e-12


def test_rope2d_matches_matrix_oracle():
    rng = np.random.default_rng(1)
    d = 16
    for _ in range(20):
        v = rng.standard_normal(d)
        c = rng.uniform(0, 30, 2)
        out = rope2d_apply(
            torch.tensor(v[None], dtype=torch.float64),
            torch.tensor(c[None], dtype=torch.float64),
        ).numpy()[0]
        assert np.abs(out - rope2d_matrix(c, d) @ v).max() < 1e-12


def test_rope3d_identity_at_zero():
    v = torch.randn(5, 24)
    out = rope3d_apply(v, torch.zeros(5, 3))
    assert torch.equal(out, v) or (out - v).abs().max() < 1e-12


def test_rope3d_first_plane_negated_at_unit_x():
    # subspace k=1 has frequency pi exactly; coordinate x=1 flips its x-plane
    d = 24
    v = torch.zeros(1, d, dtype=torch.float64)
    v[0, 0], v[0, 1] = 0.8, -0.6
    out = rope3d_apply(v, torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64))
    assert abs(out[0, 0].item() + 0.8) < 1e-12
    assert abs(out[0, 1].item() - 0.6) < 1e-12
    assert out[0, 2:].abs().max() < 1e-12


def test_rope3d_norms_and_shift_invariance():
    rng = np.random.default_rng(2)
    d = 24
    for _ in range(300):
        q = torch.tensor(rng.standard_normal(d)[None])
        k = torch.tensor(rng.standard_normal(d)[None])
        cq = rng.uniform(0, 1, 3)
        ck = rng.uniform(0, 1, 3)
        s = rng.uniform(-0.5, 0.5, 3)
        rq = rope3d_apply(q, torch.tensor(cq[None]))
        assert abs(rq.norm().item() - q.norm().item()) < 1e-6
        base = (rq * rope3d_apply(k, torch.tensor(ck[None]))).sum()
        shifted = (
            rope3d_apply(q, torch.tensor((cq + s)[None]))
            * rope3d_apply(k, torch.tensor((ck + s)[None]))
        ).sum()
        assert abs(base.item() - shifted.item()) < 1e-5


def test_rope2d_identity_norms_shift():
    rng = np.random.default_rng(3)
    d = 16
    v = torch.randn(4, d)
    assert (rope2d_apply(v, torch.zeros(4, 2)) - v).abs().max() < 1e-12
    for _ in range(300):
        q = torch.tensor(rng.standard_normal(d)[None])
        k = torch.tensor(rng.standard_normal(d)[None])
        cq, ck = rng.uniform(0, 20, 2), rng.uniform(0, 20, 2)
        s = rng.uniform(-10, 10, 2)
        rq = rope2d_apply(q, torch.tensor(cq[None]))
        assert abs(rq.norm().item() - q.norm().item()) < 1e-6
        base = (rq * rope2d_apply(k, torch.tensor(ck[None]))).sum()
        shifted = (
            rope2d_apply(q, torch.tensor((cq + s)[None]))
            * rope2d_apply(k, torch.tensor((ck + s)[None]))
        ).sum()
        assert abs(base.item() - shifted.item()) < 1e-5


def test_rope_dim_validation():
    with pytest.raises(ShapeMismatchError):
        rope3d_apply(torch.zeros(1, 10), torch.zeros(1, 3))
    with pytest.raises(ShapeMismatchError):
        rope2d_apply(torch.zeros(1, 10), torch.zeros(1, 2))


# --- attention ---------------------------------------------------------------


def naive_attention(q, k, v):
    """Direct summation oracle: out_m = sum_j softmax_j(exp(q.k/sqrt(d))) v_j."""
    M, d = q.shape
    out = np.zeros_like(q)
    for m in range(M):
        sims = np.array([math.exp(float(q[m] @ k[j]) / math.sqrt(d)) for j in range(len(k))])
        w = sims / sims.sum()
        out[m] = sum(w[j] * v[j] for j in range(len(k)))
    return out


def test_attention_single_token():
    q = torch.randn(1, 12)
    k = torch.randn(1, 12)
    v = torch.randn(1, 12)
    out = attention(q, k, v, num_heads=2)
    assert torch.allclose(out, v, atol=1e-6)


def test_attention_identical_keys_mean_value():
    q = torch.randn(3, 12)
    key = torch.randn(1, 12)
    k = key.repeat(2, 1)
    v = torch.randn(2, 12)
    out = attention(q, k, v, num_heads=1)
    assert torch.allclose(out, v.mean(dim=0).expand(3, 12), atol=1e-6)


def test_attention_matches_naive_oracle():
    rng = np.random.default_rng(4)
    q = rng.standard_normal((8, 24))
    k = rng.standard_normal((5, 24))
    v = rng.standard_normal((5, 24))
    out = attention(
        torch.tensor(q), torch.tensor(k), torch.tensor(v), num_heads=1
    ).numpy()
    assert np.abs(out - naive_attention(q, k, v)).max() < 1e-5


def test_attention_multihead_matches_per_head_oracle():
    rng = np.random.default_rng(5)
    d, h = 24, 2
    q = rng.standard_normal((6, d))
    k = rng.standard_normal((7, d))
    v = rng.standard_normal((7, d))
    out = attention(
        torch.tensor(q), torch.tensor(k), torch.tensor(v), num_heads=h
    ).numpy()
    expect = np.concatenate(
        [
            naive_attention(q[:, i * 12 : (i + 1) * 12], k[:, i * 12 : (i + 1) * 12],
                            v[:, i * 12 : (i + 1) * 12])
            for i in range(h)
        ],
        axis=1,
    )
    assert np.abs(out - expect).max() < 1e-5


def test_attention_rope_applied_to_qk_only():
    # with rope on, values must pass through unrotated: single-token check
    q = torch.randn(1, 12, dtype=torch.float64)
    k = torch.randn(1, 12, dtype=torch.float64)
    v = torch.randn(1, 12, dtype=torch.float64)
    c = torch.rand(1, 3, dtype=torch.float64)
    out = attention(q, k, v, num_heads=1, rope="3d", coords_q=c, coords_k=c)
    assert torch.allclose(out, v, atol=1e-12)


# --- SwiGLU ------------------------------------------------------------------


def test_swiglu_hidden_widths():
    assert swiglu_hidden(576) == 1536
    assert swiglu_hidden(96) == 256
    assert swiglu_hidden(24) == 64


def test_swiglu_zero_input_zero_bias():
    ffn = SwiGLU(24)
    with torch.no_grad():
        ffn.w1.bias.zero_()
        ffn.w2.bias.zero_()
        ffn.w3.bias.zero_()
    out = swiglu_ffn(torch.zeros(5, 24), ffn)
    assert out.abs().max() == 0
    assert out.shape == (5, 24)


def test_swiglu_gradcheck():
    torch.manual_seed(10)
    ffn = SwiGLU(24).double()
    x = torch.randn(4, 24, dtype=torch.float64)
    probe = torch.randn(4, 24, dtype=torch.float64)
    fd_check(lambda: (swiglu_ffn(x, ffn) * probe).sum(), ffn)


# --- encoder -----------------------------------------------------------------


def make_template_inputs(rng, n_templates, hp, wp, d, all_fg=True):
    grids, nocs_grids = [], []
    for _ in range(n_templates):
        g = PatchDescriptorGrid(
            torch.tensor(rng.standard_normal((hp, wp, d)), dtype=torch.float32),
            (hp * 14, wp * 14),
        )
        nocs = rng.uniform(0, 1, (hp, wp, 3))
        mask = np.ones((hp, wp), dtype=bool)
        if not all_fg:
            mask = rng.uniform(size=(hp, wp)) > 0.3
            mask[0, 0] = True
        grids.append(g)
        nocs_grids.append((nocs, mask))
    return grids, nocs_grids


def test_encoder_token_count():
    torch.manual_seed(11)
    rng = np.random.default_rng(11)
    enc = Encoder(12, 2)
    grids, nocs_grids = make_template_inputs(rng, 12, 10, 10, 12)
    seq = encoder_forward(grids, nocs_grids, enc)
    assert len(seq) == 1200
    assert seq.origin.shape == (1200, 3)
    assert torch.isfinite(seq.tokens).all()


def test_encoder_background_excluded():
    torch.manual_seed(12)
    rng = np.random.default_rng(12)
    enc = Encoder(12, 2)
    grids, nocs_grids = make_template_inputs(rng, 3, 4, 4, 12, all_fg=False)
    seq = encoder_forward(grids, nocs_grids, enc)
    expected = sum(m.sum() for _, m in nocs_grids)
    assert len(seq) == expected
    for tok_i, (t, r, c) in enumerate(seq.origin):
        assert nocs_grids[t][1][r, c]


def test_encoder_permutation_equivariance():
    torch.manual_seed(13)
    rng = np.random.default_rng(13)
    enc = Encoder(12, 2)
    grids, nocs_grids = make_template_inputs(rng, 4, 3, 3, 12)
    base = encoder_forward(grids, nocs_grids, enc)
    perm = [2, 0, 3, 1]
    permuted = encoder_forward(
        [grids[i] for i in perm], [nocs_grids[i] for i in perm], enc
    )
    # reorder permuted outputs back via provenance and compare
    lookup = {}
    for i, (t, r, c) in enumerate(permuted.origin):
        lookup[(perm[t], r, c)] = i
    for i, (t, r, c) in enumerate(base.origin):
        j = lookup[(t, r, c)]
        assert (base.tokens[i] - permuted.tokens[j]).abs().max() < 1e-5


def test_encoder_cross_template_attention_is_live():
    torch.manual_seed(14)
    rng = np.random.default_rng(14)
    enc = Encoder(12, 2)
    grids, nocs_grids = make_template_inputs(rng, 3, 3, 3, 12)
    full = encoder_forward(grids, nocs_grids, enc)
    solo = encoder_forward(grids[:1], nocs_grids[:1], enc)
    assert (full.tokens[: len(solo)] - solo.tokens).abs().max() > 1e-4


def test_encoder_finite_on_adversarial_magnitudes():
    torch.manual_seed(15)
    rng = np.random.default_rng(15)
    enc = Encoder(12, 2)
    grids, nocs_grids = make_template_inputs(rng, 2, 3, 3, 12)
    big = [
        PatchDescriptorGrid(g.data * 1e3, g.image_size) for g in grids
    ]
    seq = encoder_forward(big, nocs_grids, enc)
    assert torch.isfinite(seq.tokens).all()


def test_encoder_block_gradcheck():
    torch.manual_seed(16)
    block = EncoderBlock(24, 2).double()
    x = torch.randn(6, 24, dtype=torch.float64)
    coords = torch.rand(6, 3, dtype=torch.float64)
    probe = torch.randn(6, 24, dtype=torch.float64)
    fd_check(lambda: (block(x, coords) * probe).sum(), block)


# --- decoder -----------------------------------------------------------------


def make_decoder_inputs(rng, hp=3, wp=3, d=24, m=10, dtype=torch.float32):
    img = PatchDescriptorGrid(
        torch.tensor(rng.standard_normal((hp, wp, d)), dtype=dtype), (hp * 14, wp * 14)
    )
    seq = TokenSequence(
        tokens=torch.tensor(rng.standard_normal((m, d)), dtype=dtype),
        coords3d=torch.tensor(rng.uniform(0, 1, (m, 3)), dtype=dtype),
        origin=np.zeros((m, 3), dtype=np.int64),
    )
    return img, seq


def test_decoder_retained_layers_unit_norm():
    torch.manual_seed(17)
    rng = np.random.default_rng(17)
    dec = Decoder(24, 2)
    img, seq = make_decoder_inputs(rng)
    outs = decoder_forward(img, seq, dec)
    assert len(outs.layers) == 4
    for layer in (2, 3, 4):
        img_t, tmpl_t = outs.retained()[layer]
        assert (img_t.norm(dim=-1) - 1).abs().max() < 1e-6
        assert (tmpl_t.norm(dim=-1) - 1).abs().max() < 1e-6


def test_decoder_deterministic():
    torch.manual_seed(18)
    rng = np.random.default_rng(18)
    dec = Decoder(24, 2)
    img, seq = make_decoder_inputs(rng)
    a = decoder_forward(img, seq, dec)
    b = decoder_forward(img, seq, dec)
    for (ia, ta), (ib, tb) in zip(a.layers, b.layers):
        assert torch.equal(ia, ib) and torch.equal(ta, tb)


def test_decoder_layer_gradcheck():
    torch.manual_seed(19)
    layer = DecoderLayer(24, 2).double()
    img = torch.randn(4, 24, dtype=torch.float64)
    tmpl = torch.randn(5, 24, dtype=torch.float64)
    coords = torch.tensor([[0.0, 0], [0, 1], [1, 0], [1, 1]], dtype=torch.float64)
    probe_i = torch.randn(4, 24, dtype=torch.float64)
    probe_t = torch.randn(5, 24, dtype=torch.float64)

    def loss():
        i, t = layer(img, tmpl, coords)
        return (i * probe_i).sum() + (t * probe_t).sum()

    fd_check(loss, layer)


def test_decoder_full_gradcheck():
    torch.manual_seed(20)
    rng = np.random.default_rng(20)
    dec = Decoder(24, 2).double()
    img, seq = make_decoder_inputs(rng, hp=2, wp=2, d=24, m=5, dtype=torch.float64)
    probe = torch.randn(4, 24, dtype=torch.float64)

    def loss():
        outs = decoder_forward(img, seq, dec)
        img4, tmpl4 = outs.layers[3]
        return (img4 * probe).sum() + tmpl4.sum()

    fd_check(loss, dec, samples_per_tensor=3)
