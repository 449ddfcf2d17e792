"""Cross-frame attention and the zero-initialized fusion.

Shows the three mask guarantees of the instance branch (full mask equals
the scene branch bit for bit, excluded keys get exactly zero weight, an
empty previous mask zeroes the output) and why a freshly built block is
invisible: both branches re-enter through a zero convolution, so until
training moves those weights the features pass through unchanged.
"""

import numpy as np

from mvdiff.ftcm import CrossFrameAttention, FtcmBlock, instance_attention, scene_attention
from mvdiff.rng import RngStream
from mvdiff.tensor import tensor

rng = RngStream(7)
attn = CrossFrameAttention(channels=8, heads=2, rng=rng.fork("attn"))
feat = tensor(rng.fork("q").normal((1, 8, 4, 4)))      # current frame features
cache = tensor(rng.fork("c").normal((1, 8, 4, 4)))     # previous frame features

ones = np.ones((1, 1, 4, 4), dtype=np.float32)
scene = scene_attention(attn, feat, cache)
inst_full = instance_attention(attn, feat, cache, ones, ones)
print("full-mask instance == scene bitwise:", np.array_equal(scene.data, inst_full.data))

mask_prev = ones.copy()
mask_prev[0, 0, :2, :] = 0.0  # first half of the previous frame is background
weights = attn.attention_map(feat, cache, mask_kv=mask_prev)
print("max weight on excluded keys:", weights.reshape(1, 2, 16, 16)[:, :, :, :8].max())
print("weights still sum to one per row:", np.allclose(weights.sum(-1), 1.0))

empty = np.zeros_like(ones)
gone = instance_attention(attn, feat, cache, ones, empty)
print("empty previous mask -> all-zero output:", not np.any(gone.data))

block = FtcmBlock(channels=8, heads=2, rng=rng.fork("block"))
out = block(feat, cache, ones, ones)
print("untrained block is exact identity:", np.array_equal(out.data, feat.data))

# give the zero convolutions weight and the block wakes up
for fuse in (block.fuse_scene, block.fuse_ins):
    fuse.conv.w.data[:] = rng.fork("wake").normal(fuse.conv.w.data.shape) * 0.2
out2 = block(feat, cache, ones, ones)
print("after moving the fusion weights, max |delta|: %.4f" % np.abs(out2.data - feat.data).max())
