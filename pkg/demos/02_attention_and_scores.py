"""Walkthrough: the attention block and the transferability score.

Shows, on tiny arrays you can read in full:
  * the attention matrix is column-normalized and applied transposed, so
    every output pixel is a convex mix of value vectors;
  * a fresh block is exactly the identity (its residual scale starts at 0);
  * the uncertainty-based transferability score: 0 where the discriminator
    is fooled, approaching 1 where it is certain;
  * the residual feedback weight 1 + P that can amplify but never suppress.

Run:  python demos/02_attention_and_scores.py
"""

import numpy as np

from adaseg.autodiff import Tensor
from adaseg.ra2b import RA2B, attention_apply, attention_map
from adaseg.transferability import residual_weight, transferability

np.set_printoptions(precision=3, suppress=True)
rng = np.random.default_rng(0)

print("== attention on a 4-pixel, 2-channel map ==")
c1 = rng.normal(size=(4, 2))
c2 = rng.normal(size=(4, 2))
c3 = rng.normal(size=(4, 2))
m = attention_map(c1, c2)
print("M (columns sum to 1):")
print(m.data)
print("column sums:", m.data.sum(axis=0))
f_p = attention_apply(m, c3)
print("applied matrix M^T is row-stochastic; attended values:")
print(f_p.data)
print("value range", (c3.min().round(3), c3.max().round(3)),
      "contains output range", (f_p.data.min().round(3), f_p.data.max().round(3)))

print("\n== a fresh block is the identity ==")
block = RA2B(channels=2, rng=rng, gate_mode="literal", height=3, width=3)
x = rng.normal(size=(1, 2, 3, 3))
out = block(Tensor(x))
print("max |out - in| at init:", np.max(np.abs(out.data - x)))
block.delta.data = np.asarray(0.8, dtype=np.float32)
out2 = block(Tensor(x.astype(np.float32)))
print("after setting the residual scale to 0.8:", np.max(np.abs(out2.data - x)).round(4))

print("\n== transferability from discriminator uncertainty ==")
d_out = np.array([[[[0.5, 0.7], [0.9, 0.99]]]])
p = transferability(d_out, source="demo")
print("discriminator output:")
print(d_out[0, 0])
print("score P = 1 - binary entropy (0 where fooled):")
print(p.values[0, 0])
print("residual feedback weight 1 + P (never below 1):")
print(residual_weight(p)[0, 0])
