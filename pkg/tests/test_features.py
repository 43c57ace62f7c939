import struct

import numpy as np
import pytest
import torch

from grad_utils import fd_check
from posekit.errors import CheckpointFormatError, ShapeMismatchError
from posekit.features import (
    MultiLayerDescriptorStack,
    PatchDescriptorGrid,
    ToyBackbone,
    WeightAdapter,
    downsample_nocs,
    load_descriptor_stack,
    oracle_backbone,
    save_descriptor_stack,
    toy_backbone_forward,
    weight_adapter_forward,
)


def random_stack(rng, L=4, hp=5, wp=6, c=16):
    return MultiLayerDescriptorStack(
        torch.from_numpy(rng.standard_normal((L, hp, wp, c)).astype(np.float32))
    )


# --- PDSK files -------------------------------------------------------------


def test_pdsk_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    stack = random_stack(rng)
    p = tmp_path / "s.pdsk"
    save_descriptor_stack(p, stack)
    back = load_descriptor_stack(p)
    assert back.data.shape == stack.data.shape
    assert np.array_equal(
        back.data.numpy().view(np.uint32), stack.data.numpy().view(np.uint32)
    )


def test_pdsk_truncated(tmp_path):
    rng = np.random.default_rng(1)
    p = tmp_path / "s.pdsk"
    save_descriptor_stack(p, random_stack(rng))
    raw = p.read_bytes()
    p.write_bytes(raw[:-5])
    with pytest.raises(CheckpointFormatError):
        load_descriptor_stack(p)


def test_pdsk_bad_magic_and_version(tmp_path):
    p = tmp_path / "s.pdsk"
    p.write_bytes(b"NOPE" + b"\x00" * 24)
    with pytest.raises(CheckpointFormatError):
        load_descriptor_stack(p)
    p.write_bytes(b"PDSK" + struct.pack("<5I", 9, 1, 1, 1, 1) + b"\x00" * 4)
    with pytest.raises(CheckpointFormatError):
        load_descriptor_stack(p)


def test_pdsk_vit_l_dims_accepted(tmp_path):
    # ViT-L at 420 px: L=24, c=1024, grid 30x30 (sparse file, zero payload)
    L, hp, wp, c = 24, 30, 30, 1024
    p = tmp_path / "vitl.pdsk"
    with open(p, "wb") as f:
        f.write(b"PDSK" + struct.pack("<5I", 1, L, hp, wp, c))
        f.seek(24 + 4 * L * hp * wp * c - 1)
        f.write(b"\x00")
    stack = load_descriptor_stack(p)
    assert stack.layers == 24 and stack.grid == (30, 30) and stack.channels == 1024


# --- weight adapter ---------------------------------------------------------


def zeroed(adapter):
    with torch.no_grad():
        for p in adapter.parameters():
            p.zero_()
    return adapter


def test_adapter_zero_stack_gives_shift_only():
    adapter = zeroed(WeightAdapter(layers=2, channels=8, dim=12))
    with torch.no_grad():
        adapter.norm.bias.copy_(torch.arange(12, dtype=torch.float32))
    stack = MultiLayerDescriptorStack(torch.zeros(2, 3, 4, 8))
    out = weight_adapter_forward(stack, adapter)
    assert torch.allclose(out.data, torch.arange(12.0).expand(3, 4, 12))


def test_adapter_1x1_grid_center_tap_oracle():
    torch.manual_seed(3)
    adapter = WeightAdapter(layers=3, channels=5, dim=6).double()
    stack = MultiLayerDescriptorStack(torch.randn(3, 1, 1, 5, dtype=torch.float64))
    out = weight_adapter_forward(stack, adapter).data.reshape(6)

    # hand-rolled scalar path: reduce, then only each kernel's center tap fires
    concat = stack.data.permute(1, 2, 0, 3).reshape(-1)
    reduced = adapter.reduce.weight.detach() @ concat + adapter.reduce.bias.detach()
    acc = torch.zeros(6, dtype=torch.float64)
    for conv in adapter.convs:
        center = conv.weight.detach()[:, :, 1, 1]  # (out, in)
        acc = acc + center @ reduced + conv.bias.detach()
    mu, var = acc.mean(), acc.var(unbiased=False)
    expect = (acc - mu) / torch.sqrt(var + adapter.norm.eps)
    expect = expect * adapter.norm.weight.detach() + adapter.norm.bias.detach()
    assert torch.allclose(out, expect, atol=1e-12)


def naive_adapter(stack_np, adapter):
    """Independent triple-loop reimplementation in numpy/float64."""
    L, hp, wp, c = stack_np.shape
    d = adapter.dim
    w_r = adapter.reduce.weight.detach().double().numpy()
    b_r = adapter.reduce.bias.detach().double().numpy()
    reduced = np.zeros((hp, wp, d))
    for r in range(hp):
        for col in range(wp):
            concat = np.concatenate([stack_np[l, r, col] for l in range(L)])
            reduced[r, col] = w_r @ concat + b_r
    summed = np.zeros((hp, wp, d))
    for conv, dil in zip(adapter.convs, (1, 2, 3, 4)):
        k = conv.weight.detach().double().numpy()  # (out, in, 3, 3)
        b = conv.bias.detach().double().numpy()
        for r in range(hp):
            for col in range(wp):
                acc = b.copy()
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ry, cx = r + dy * dil, col + dx * dil
                        if 0 <= ry < hp and 0 <= cx < wp:
                            acc += k[:, :, dy + 1, dx + 1] @ reduced[ry, cx]
                summed[r, col] += acc
    mu = summed.mean(axis=2, keepdims=True)
    var = summed.var(axis=2, keepdims=True)
    normed = (summed - mu) / np.sqrt(var + adapter.norm.eps)
    return normed * adapter.norm.weight.detach().numpy() + adapter.norm.bias.detach().numpy()


def test_adapter_matches_naive_loops():
    torch.manual_seed(4)
    rng = np.random.default_rng(4)
    adapter = WeightAdapter(layers=4, channels=16, dim=12)
    stack_np = rng.standard_normal((4, 10, 10, 16))
    stack = MultiLayerDescriptorStack(torch.from_numpy(stack_np.astype(np.float32)))
    out = weight_adapter_forward(stack, adapter).data.detach().numpy()
    expect = naive_adapter(stack_np, adapter)
    assert np.abs(out - expect).max() < 1e-5


def test_adapter_dim_mismatch():
    adapter = WeightAdapter(layers=4, channels=16, dim=12)
    stack = MultiLayerDescriptorStack(torch.zeros(3, 4, 4, 16))
    with pytest.raises(ShapeMismatchError):
        weight_adapter_forward(stack, adapter)


def test_adapter_layernorm_statistics():
    torch.manual_seed(5)
    adapter = WeightAdapter(layers=2, channels=6, dim=24)
    stack = MultiLayerDescriptorStack(torch.randn(2, 7, 7, 6))
    out = weight_adapter_forward(stack, adapter).data.detach()
    assert out.mean(dim=-1).abs().max() < 1e-5
    assert (out.var(dim=-1, unbiased=False) - 1).abs().max() < 1e-3


def symmetrize_kernels(adapter):
    with torch.no_grad():
        for conv in adapter.convs:
            k = conv.weight
            k.copy_((k + k.flip(-1) + k.flip(-2) + k.flip(-1, -2)) / 4.0)


def test_adapter_flip_equivariance_with_symmetric_kernels():
    torch.manual_seed(6)
    adapter = WeightAdapter(layers=2, channels=4, dim=6)
    symmetrize_kernels(adapter)
    stack = torch.randn(2, 6, 9, 4)
    base = weight_adapter_forward(
        MultiLayerDescriptorStack(stack), adapter
    ).data.detach()
    for dim in (1, 2):  # flip rows / cols of the grid
        flipped = weight_adapter_forward(
            MultiLayerDescriptorStack(stack.flip(dim)), adapter
        ).data.detach()
        assert torch.allclose(flipped, base.flip(dim - 1), atol=1e-5)


def test_adapter_gradcheck():
    torch.manual_seed(7)
    adapter = WeightAdapter(layers=2, channels=4, dim=6).double()
    stack = MultiLayerDescriptorStack(torch.randn(2, 3, 3, 4, dtype=torch.float64))
    probe = torch.randn(3, 3, 6, dtype=torch.float64)

    def loss():
        return (weight_adapter_forward(stack, adapter).data * probe).sum()

    fd_check(loss, adapter)


# --- toy backbone -----------------------------------------------------------


def test_toy_backbone_constant_image():
    torch.manual_seed(8)
    bb = ToyBackbone(channels=6)
    img = torch.full((42, 56, 3), 0.37)
    stack = toy_backbone_forward(img, bb)
    assert stack.data.shape == (4, 3, 4, 6)
    flat = stack.data.reshape(4, -1, 6)
    assert (flat - flat[:, :1]).abs().max() < 1e-6


def test_toy_backbone_grid_dims():
    bb = ToyBackbone(channels=4)
    stack = toy_backbone_forward(torch.zeros(28, 70, 3), bb)
    assert stack.grid == (2, 5)
    with pytest.raises(ShapeMismatchError):
        toy_backbone_forward(torch.zeros(30, 70, 3), bb)


def test_toy_backbone_gradcheck():
    torch.manual_seed(9)
    bb = ToyBackbone(channels=4).double()
    img = torch.rand(28, 28, 3, dtype=torch.float64)
    probe = torch.randn(4, 2, 2, 4, dtype=torch.float64)

    def loss():
        return (toy_backbone_forward(img, bb).data * probe).sum()

    fd_check(loss, bb)


# --- oracle backbone --------------------------------------------------------


def checker_nocs(hp, wp, values):
    """Build a full-res NOCS/mask pair with constant per-patch values."""
    nocs = np.zeros((hp * 14, wp * 14, 3))
    mask = np.ones((hp * 14, wp * 14), dtype=bool)
    for r in range(hp):
        for c in range(wp):
            nocs[r * 14 : (r + 1) * 14, c * 14 : (c + 1) * 14] = values[r][c]
    return nocs, mask


def test_oracle_identical_means_identical_descriptors():
    v = [[(0.2, 0.5, 0.7), (0.2, 0.5, 0.7)], [(0.9, 0.1, 0.3), (0.2, 0.5, 0.7)]]
    nocs, mask = checker_nocs(2, 2, v)
    grid = oracle_backbone(nocs, mask, dim=96).data.numpy()
    assert np.allclose(grid[0, 0], grid[0, 1])
    assert np.allclose(grid[0, 0], grid[1, 1])
    assert not np.allclose(grid[0, 0], grid[1, 0])
    assert np.abs(np.linalg.norm(grid, axis=2) - 1).max() < 1e-6


def test_oracle_background_patch_zero():
    nocs = np.random.default_rng(0).uniform(size=(28, 28, 3))
    mask = np.zeros((28, 28), dtype=bool)
    mask[:14, :14] = True  # only patch (0,0) has foreground
    grid = oracle_backbone(nocs, mask, dim=48).data.numpy()
    assert np.all(grid[0, 1] == 0) and np.all(grid[1, 0] == 0) and np.all(grid[1, 1] == 0)
    assert np.linalg.norm(grid[0, 0]) > 0.99


def test_oracle_lipschitz_cosine():
    rng = np.random.default_rng(10)
    for _ in range(100):
        m = rng.uniform(0.2, 0.8, size=3)
        delta = rng.normal(size=3)
        delta *= 0.009 / np.linalg.norm(delta)
        nocs, mask = checker_nocs(1, 2, [[tuple(m), tuple(m + delta)]])
        grid = oracle_backbone(nocs, mask, dim=96).data.numpy()
        cos = float(grid[0, 0] @ grid[0, 1])
        assert cos > 0.99


def test_oracle_deterministic_across_calls():
    nocs = np.random.default_rng(11).uniform(size=(42, 42, 3))
    mask = np.ones((42, 42), dtype=bool)
    a = oracle_backbone(nocs, mask).data.numpy()
    b = oracle_backbone(nocs, mask).data.numpy()
    assert np.array_equal(a, b)


def test_downsample_nocs_foreground_mean():
    nocs = np.zeros((28, 14, 3))
    mask = np.zeros((28, 14), dtype=bool)
    mask[0, 0] = True
    nocs[0, 0] = (0.1, 0.2, 0.3)
    mask[1, 1] = True
    nocs[1, 1] = (0.3, 0.4, 0.5)
    pn, pm = downsample_nocs(nocs, mask)
    assert pm.tolist() == [[True], [False]]
    assert np.allclose(pn[0, 0], (0.2, 0.3, 0.4))
    assert np.all(pn[1, 0] == 0)


def test_grid_type_validates_dim():
    with pytest.raises(ShapeMismatchError):
        PatchDescriptorGrid(torch.zeros(2, 2, 10), (28, 28))  # 10 % 6 != 0
    with pytest.raises(ShapeMismatchError):
        PatchDescriptorGrid(torch.zeros(2, 2, 12), (28, 42))  # wrong grid for size
