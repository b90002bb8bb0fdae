"""voxtox: audio-only speech toxicity classification with text injection.

A small, fully testable training/evaluation stack: a tape-based autodiff
core, a desk-scale transformer speech encoder with per-layer tap points, a
frozen text sentence-embedding provider, MSE/contrastive alignment losses,
the chunked-inference evaluation protocol (per-class AP with bootstrap
CIs), and a synthetic corpus generator with a rule-based weak labeler.
"""

__version__ = "0.1.0"
