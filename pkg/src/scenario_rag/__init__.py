"""Driving-scenario retrieval: graph distances, embeddings, ANN search, RAG."""

__version__ = "0.1.0"
