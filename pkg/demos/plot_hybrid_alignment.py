"""
The three alignment terms
=========================

Current and historical representations are pulled together by a direct
L2 term, a margin hinge over cosine similarities and a distribution term
weighted by a learned proxy score.
"""
import torch

from modalinc import ProxyScorer, contrastive_align, direct_align, distribution_align, hybrid_align

torch.manual_seed(0)
n, d = 8, 16
o_hist = torch.randn(n, d)
scorer = ProxyScorer(d)

for noise in (0.0, 0.1, 1.0, 3.0):
    o_cur = o_hist + noise * torch.randn(n, d)
    print(f"noise {noise:3.1f}  direct {direct_align(o_cur, o_hist).item():7.3f}"
          f"  contrastive {contrastive_align(o_cur, o_hist, 0.3).item():6.3f}"
          f"  distribution {distribution_align(o_cur, o_hist, scorer).item():6.3f}"
          f"  hybrid {hybrid_align(o_cur, o_hist, scorer).item():7.3f}")

# beta lives on the simplex over the batch
beta = scorer(o_hist).detach()
print("beta sum:", float(beta.sum()), "min:", float(beta.min()))
