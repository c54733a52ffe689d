"""Monocular peer-robot relative localization, desk-scale.

Pipeline pieces: synthetic scene compositing (`datagen`), a small
grid-output CNN trained from scratch (`nn`, `model`), detection decoding
and metrics (`detect`), int8 post-training quantization (`quantize`),
and a simulated UWB range EKF that produces self-supervised labels
(`uwb_ekf`). `cli` ties them together.
"""

__version__ = "0.1.0"
