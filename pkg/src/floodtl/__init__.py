"""Transfer-learning flood tweet classifier: AWD-LSTM pretraining, fine-tuning and evaluation."""

__version__ = "0.1.0"
