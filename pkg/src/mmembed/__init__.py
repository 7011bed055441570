"""Multilingual multimodal sentence embeddings.

Joint image/caption encoders trained with a hardest-negative margin ranking
loss under a Bernoulli-switched caption-to-image / caption-to-caption task
schedule, plus a synthetic grounded-corpus generator and an experiment
harness for the standard retrieval benchmarks.
"""

__version__ = "0.1.0"
