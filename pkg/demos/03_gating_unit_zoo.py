"""The gating unit family and its degeneracies.

The baseline unit splits channels, mixes one half over tokens with a dense
matrix and gates the other half.  The positional variants swap the dense
matrix for displacement-indexed generators; setting their extra parameters
to zero recovers the simpler family members exactly.
"""

import numpy as np

from posmlp.gating import Combine, GatingConfig, GatingKind, GatingUnit
from posmlp.tensor import Tensor

rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((1, 9, 8)))


def unit(kind, **kw):
    cfg = GatingConfig(kind=kind, window_side=3, **kw)
    return GatingUnit(cfg, 8, rng=np.random.default_rng(7), dtype=np.float64)


for kind, kw in [(GatingKind.SGU, {}), (GatingKind.LRPE_M, {}), (GatingKind.LRPE, {}),
                 (GatingKind.GLRPE, {"groups": 2}), (GatingKind.GGQPE, {"groups": 2})]:
    u = unit(kind, **kw)
    n_params = sum(p.size for p in u.parameters().values())
    print(f"{kind.value:8s} -> output {u.forward(x).shape}, {n_params} parameters")

# degeneracy: zero lookup table turns the merged variant into the baseline
merged = unit(GatingKind.LRPE_M, use_bias=True)
base = unit(GatingKind.SGU, use_bias=True)
merged.lrpe.values.data[:] = 0.0
for dst, src in [(base.token_fc_weight, merged.token_fc_weight), (base.bias, merged.bias),
                 (base.norm_gain, merged.norm_gain), (base.norm_shift, merged.norm_shift)]:
    dst.data[:] = src.data
gap = np.abs(merged.forward(x).data - base.forward(x).data).max()
print(f"\nmerged variant with zero table == baseline: max gap {gap:.2e}")

# combine-mode ablations change only how the mixed half meets the gate half
for combine in Combine:
    u = unit(GatingKind.GGQPE, groups=2, combine=combine)
    print(f"combine={combine.value:6s} output width {u.forward(x).shape[-1]}")
u = unit(GatingKind.GGQPE, groups=2, split_channels=False)
print(f"no channel split     output width {u.forward(x).shape[-1]}")
