"""Layer-wise knowledge distillation for toy transformer LMs.

Intermediate hidden states are projected into vocabulary space by trainable
verbalizers; an adaptive layer-matching loss aligns a shallow student's
layer progression with a deep teacher's, and a supervised reinforcement
stage consolidates the transfer.
"""

__version__ = "0.1.0"
