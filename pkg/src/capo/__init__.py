"""CAPO: contrastive prompt learning with adaptive prompt orchestration.

Desk-scale implementation: a deterministic egocentric grid-world navigation
simulator with parametric photometric/embodiment domain factors, a compact
frozen vision transformer with learnable prompt injection, hybrid contrastive
prompt training, attention-based prompt orchestration, and a recurrent PPO
policy, plus the evaluation/ablation tooling around them.
"""

__version__ = "0.1.0"
