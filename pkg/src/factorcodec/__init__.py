"""Disentangled speech codec with a text-to-codec language model.

Speech is factorized into three token streams (frame-level content,
frame-level prosody, fixed-length global timbre), content and prosody are
fused into a single timbre-free token sequence, and an autoregressive
language model predicts those tokens from text so that prosody can be
continued from one prompt while timbre is injected from another.
"""

__version__ = "0.1.0"
