"""Class-conditional foley synthesis: CEmbed features, MVQVAE, Zen PixelSNAIL, FAD."""

__version__ = "0.1.0"
