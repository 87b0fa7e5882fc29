"""Multi-modal video captioning: memory-augmented encoders, gated additive
fusion, WordPiece tokenization, XE/SCST training, beam decoding, and caption
metrics, built on a self-contained float64 autodiff core."""

__version__ = "0.1.0"
