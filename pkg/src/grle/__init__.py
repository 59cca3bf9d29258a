"""grle: desk-scale embedding-model training and retrieval evaluation.

Core pieces: a numpy-backed reverse-mode autodiff substrate, a small
decoder-only transformer with a switchable causal/bidirectional attention
mask and LoRA adapters, the contrastive/SFT/DPO/generation-consistency loss
family, a gradient-caching trainer, and an exact retrieval eval harness.
"""

__version__ = "0.1.0"
