"""Compression policies, pruning and fake quantization.

Submodules are imported directly (``rlcompress.compress.policy`` and so on);
the model executor depends on :mod:`.quant`, so this package stays import-light.
"""
