"""Single-pass audio style transfer with a spectrogram autoencoder."""

__version__ = "0.1.0"
