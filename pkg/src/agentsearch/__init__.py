"""Agentic retrieval harness.

Runs ReAct-style search agents against local corpora, composes retrieval
inputs from reasoning traces, synthesizes contrastive retriever training data
through oracle reranking, and evaluates end-to-end accuracy/recall/call
metrics.
"""

__version__ = "0.1.0"
