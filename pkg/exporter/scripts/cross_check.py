"""Cross-check an exported PDSK stack against the pose toolkit's ingestion path.

Run from the exporter test suite as::

    python3 scripts/cross_check.py <small.pdsk> <large.pdsk>

Checks, in order:

1. Both files parse with ``posekit.features.load_descriptor_stack`` and
   carry the full-width layout (L=24, c=1024, square grid, finite values).
2. A 576-dim weight adapter sized for that layout trains for a short
   desk-scale run on the small stack (noise-augmented two-view contrastive
   objective using the toolkit's own loss), and the loss drops.
3. The large stack fed through the trained adapter yields finite
   descriptors whose pre-affine layer-norm statistics are unit: per patch,
   (out - shift) / scale has mean 0 and variance 1 within float32 noise.

Exits 0 and prints "cross-check ok" on success; raises otherwise.
"""

import argparse
import sys

import numpy as np
import torch

from posekit.features import WeightAdapter, load_descriptor_stack, weight_adapter_forward
from posekit.training import TEMPLATE_TO_IMAGE, AnchorBatch, LossConfig, focal_contrastive_loss

ADAPTER_DIM = 576  # fused descriptor width used with full-width stacks


def check_layout(path):
    stack = load_descriptor_stack(path)
    L, Hp, Wp, c = stack.data.shape
    assert L == 24, f"{path}: expected 24 layers, got {L}"
    assert c == 1024, f"{path}: expected 1024 channels, got {c}"
    assert Hp == Wp, f"{path}: expected a square grid, got {Hp}x{Wp}"
    assert torch.isfinite(stack.data).all(), f"{path}: non-finite values"
    print(f"parsed {path}: L={L} grid={Hp}x{Wp} c={c}")
    return stack


def contrastive_step(adapter, stack, rng, n_anchors=48, n_negatives=24):
    """One two-view loss: same patch index across noise augmentations."""
    noise_a = torch.from_numpy(
        rng.normal(0.0, 0.3, size=stack.data.shape).astype(np.float32)
    )
    noise_b = torch.from_numpy(
        rng.normal(0.0, 0.3, size=stack.data.shape).astype(np.float32)
    )
    view = type(stack)
    tokens_a = adapter(view(stack.data + noise_a)).data.reshape(-1, ADAPTER_DIM)
    tokens_b = adapter(view(stack.data + noise_b)).data.reshape(-1, ADAPTER_DIM)
    n = tokens_a.shape[0]
    anchors = rng.choice(n, size=min(n_anchors, n), replace=False)
    negatives = np.empty((len(anchors), n_negatives), dtype=np.int64)
    for row, a in enumerate(anchors):
        pool = rng.choice(n - 1, size=n_negatives, replace=False)
        negatives[row] = np.where(pool >= a, pool + 1, pool)
    batch = AnchorBatch(TEMPLATE_TO_IMAGE, anchors, anchors.copy(), negatives)
    return focal_contrastive_loss(batch, tokens_a, tokens_b, LossConfig(tau=0.1))


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("small", help="PDSK stack used for the short training run")
    parser.add_argument("large", help="PDSK stack checked through the trained adapter")
    parser.add_argument("--steps", type=int, default=12)
    args = parser.parse_args()

    small = check_layout(args.small)
    large = check_layout(args.large)

    torch.manual_seed(0)
    adapter = WeightAdapter(layers=24, channels=1024, dim=ADAPTER_DIM)
    optimizer = torch.optim.Adam(adapter.parameters(), lr=1e-3)
    rng = np.random.default_rng(0)

    first = last = None
    for step in range(args.steps):
        optimizer.zero_grad()
        loss = contrastive_step(adapter, small, rng)
        loss.backward()
        optimizer.step()
        last = loss.item()
        if first is None:
            first = last
    print(f"adapter training: loss {first:.4f} -> {last:.4f} over {args.steps} steps")
    assert last < first, "short training run did not reduce the loss"

    with torch.no_grad():
        fused = weight_adapter_forward(large, adapter).data
    assert torch.isfinite(fused).all(), "trained adapter produced non-finite values"
    normalized = (fused - adapter.norm.bias) / adapter.norm.weight
    mean_err = float(normalized.mean(dim=-1).abs().max())
    var_err = float((normalized.var(dim=-1, unbiased=False) - 1.0).abs().max())
    print(f"fused {tuple(fused.shape)}: per-patch |mean| <= {mean_err:.2e}, "
          f"|var - 1| <= {var_err:.2e}")
    assert mean_err < 1e-3, "descriptors are not zero-mean under the layer norm"
    assert var_err < 1e-2, "descriptors are not unit-variance under the layer norm"
    print("cross-check ok")


if __name__ == "__main__":
    sys.exit(main())
