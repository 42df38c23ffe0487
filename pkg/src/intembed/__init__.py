"""Integer embeddings from integer-sequence corpora: training (LSTM LM,
LSA, subword skipgram), mathematical-property probes, and evaluation tasks
(sequence completion, analogies, seed-set expansion)."""

__version__ = "0.1.0"
