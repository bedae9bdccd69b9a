"""WiFi CSI sensing to skeleton images, with a frame-budget scheduler for image generation."""

__version__ = "0.1.0"
