"""seqseg: video semantic segmentation with a convolutional LSTM temporal
encoder, trained with noise-injected context frames, on a hand-rolled
reverse-mode autodiff core."""

__version__ = "0.1.0"
