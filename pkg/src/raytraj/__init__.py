"""raytraj: multiview ray-attention trajectory decoding and evaluation.

The package is a desk-scale numerical library: ray geometry and weighted
triangulation, additive ray-time token conditioning, a persistent dialogue
slot, an anchor-plus-residual trajectory decoder with handwritten
reverse-mode gradients, the turn-level evaluation protocol (geometric
accuracies plus BLEU-4 / CIDEr-D), a JSON clip-dialogue data model, and a
synthetic multiview scene generator used as ground truth throughout.
"""

__version__ = "0.1.0"
