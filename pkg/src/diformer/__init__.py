"""Directional transformer for desk-scale translation experiments.

One model, four decoding modes: left-to-right and right-to-left beam
search, mask-predict, and parallel easy-first refinement, plus
bidirectional self-reranking. Ships with its own numpy autodiff core,
synthetic task generators, a training loop, metrics, and a CLI.
"""

__version__ = "0.1.0"

__all__ = ["DiformerTranslator"]


def __getattr__(name):
    # Deferred so `import diformer` stays cheap (sklearn loads only when
    # the estimator facade is actually used).
    if name == "DiformerTranslator":
        from .estimator import DiformerTranslator

        return DiformerTranslator
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
