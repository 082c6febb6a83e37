"""Question answering over personal long-term memory.

Memory classification, classification-weighted BM25 retrieval, memory
synthesis, and the evaluation harness around them.
"""

__version__ = "0.1.0"
