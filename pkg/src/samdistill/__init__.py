"""Cross-modal audio-to-vision distillation with spatial alignment via matching."""

__version__ = "0.1.0"
