"""Question generation over knowledge-base facts.

Transformer context encoder with segment embeddings, TransE-pretrainable
fact embeddings fused through a gated unit, and a decoder that mixes
vocabulary generation with KB copying (subject placeholder) and
repetition-aware context copying, trained with a question loss plus a
weighted answer-aware loss.
"""

__version__ = "0.1.0"
