"""Multimodal product retrieval: grounded image embeddings, agent-refined
queries, contrastive projection heads, pHash dedup and sharded HNSW search."""

__version__ = "0.1.0"
