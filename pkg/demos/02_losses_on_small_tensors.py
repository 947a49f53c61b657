"""Evaluate each training objective on tensors small enough to check by eye.

Run:  python demos/02_losses_on_small_tensors.py
"""

import torch

from bgdet.detector import DEFAULT_ANCHORS, DetectionLossWeights, detection_loss, iou
from bgdet.enhancer import (EnhancerLossParts, EnhancerLossWeights, adversarial_loss,
                            total_enhancer_loss)
from bgdet.guidance import (TotalLossWeights, feature_consistency_loss,
                            total_loss)

torch.manual_seed(0)

# A discriminator that cannot tell real from fake outputs 0.5 everywhere,
# so the log-form adversarial value is 2 * log(0.5).
half = torch.full((1, 1, 4, 4), 0.5)
print("adversarial value at D=0.5:", round(adversarial_loss(half, half).item(), 4))

# The enhancer objective is a weighted sum of four parts.
parts = EnhancerLossParts(*(torch.tensor(v) for v in (-1.0, -1.0, 100.0, 0.5)))
w = EnhancerLossWeights(lambda1=5e-5, lambda2=1.0)
print("enhancer total:", round(total_enhancer_loss(parts, w).item(), 4))

# Box overlap: two unit squares shifted by half a side share a third of their union.
print("iou of half-shifted squares:", round(iou((0.5, 0.5, 1, 1), (1.0, 0.5, 1, 1)), 4))

# Detection loss on random head outputs with one labelled box.
preds = [torch.randn(1, 3, 64 // s, 64 // s, 9) for s in (8, 16, 32)]
targets = torch.tensor([[0, 2, 0.4, 0.6, 0.25, 0.3]])
total, comp = detection_loss(preds, targets, DetectionLossWeights(), torch.tensor(DEFAULT_ANCHORS, dtype=torch.float32))
print("detection loss:", {k: round(v.item(), 4) for k, v in comp.items()}, "total", round(total.item(), 4))

# Feature consistency between a student map and a teacher map.
f = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
i = torch.tensor([[[1.0, 2.0], [3.0, 6.0]]])
l_con = feature_consistency_loss(f, i)
print("consistency of the 2x2 pair:", l_con.item())

# The detection branch's objective mixes the two with small weight on guidance.
print("total with eta=(1, 0.05), l_det=2, l_fgm=10:", total_loss(2.0, 10.0, TotalLossWeights(1.0, 0.05)))
