"""
Turning old classifier rows into pseudo-features
================================================

No past data is kept. Instead each row of the previous classifier acts as
a class prototype, is jittered by a small Gaussian mixture and added to
the current tokens to build a stand-in for the old modality.
"""
import torch

from modalinc import PerturbationBank, extract_prototype, mixture_coefficients, modulate, perturb_prototype

torch.manual_seed(0)
d, L, C = 32, 6, 10
prev_classifier = torch.randn(C, d)
tokens = torch.randn(L, d)            # one sample of the current modality
bank = PerturbationBank(d, num_components=3)

proto = extract_prototype(prev_classifier, 4)
with torch.no_grad():
    alpha = mixture_coefficients(bank, tokens)
print("mixture weights:", alpha.detach().numpy().round(3), "sum", float(alpha.sum()))
print("initial scales:", bank.sigma().mean(-1).detach().numpy().round(2))

g = torch.Generator().manual_seed(1)
noisy = perturb_prototype(bank, proto, alpha, 0.6, g)
clean = perturb_prototype(bank, proto, alpha, 0.0, g)
print("distance from prototype, lambda_g=0.6:", (noisy - proto).norm().item())
print("distance from prototype, lambda_g=0  :", (clean - proto).norm().item())

pseudo = modulate(noisy, tokens)
print("modulated tokens shape:", tuple(pseudo.shape))

# batched form used in training: labels pick the prototypes
batch = torch.randn(4, L, d)
print("batched bank output:", tuple(bank(batch, torch.tensor([0, 1, 2, 3]), prev_classifier, 0.6, g).shape))
