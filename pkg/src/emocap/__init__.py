"""emocap: desk-scale speech emotion captioning pipeline.

A query-transformer bridge compresses speech features into a fixed-length
emotion embedding, trained with a mutual-information upper-bound penalty
against transcription embeddings and a category-structured contrastive
loss against caption embeddings, feeding a small causal text decoder.
"""

__version__ = "0.1.0"
