"""Zero-shot point-cloud anomaly detection with geometry-aware prompts."""

__version__ = "0.1.0"
