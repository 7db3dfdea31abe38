"""Few-shot tabular classification: LLM-extracted rules, binary features, a linear ensemble."""

__version__ = '0.1.0'
