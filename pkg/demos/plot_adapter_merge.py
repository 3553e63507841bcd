"""
Folding a gated low-rank adapter into a linear layer
====================================================

During training the adapter runs as a residual branch next to the
aggregation layer. Afterwards it is merged into that layer's weights,
so inference costs nothing extra.
"""
import torch

from modalinc import GatedAdapter, adapter_apply, aggregate, merge_adapter

torch.manual_seed(0)
d, r = 64, 8
layer = torch.nn.Linear(d, d)
adapter = GatedAdapter(d, r)

# B starts at zero, so a fresh adapter is the identity perturbation
f = torch.randn(5, d)
print("fresh adapter output norm:", adapter_apply(adapter, f).norm().item())

# pretend training moved B and the gate
with torch.no_grad():
    adapter.B.normal_(0, 0.1)
    adapter.omega.fill_(0.7)

h = aggregate(layer, f)
two_branch = h + adapter_apply(adapter, h)
merged = merge_adapter(layer, adapter)
print("max |merged - two-branch|:", (merged(f) - two_branch).abs().max().item())
print("original layer untouched:", torch.equal(aggregate(layer, f), h))
