"""vlforge: raw labeled images -> instruction-ready VQA corpora, leakage-free
benchmarks, and multi-metric evaluation with a swap-debiased pairwise judge."""

__version__ = "0.1.0"
