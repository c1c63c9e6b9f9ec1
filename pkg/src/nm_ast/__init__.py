"""N:M sparse retraining of small causal language models on numpy.

Submodules: ``autodiff`` (tape autodiff), ``sparsity`` (masks), ``optim``
(schedules and update rules), ``distill``, ``slorb``, ``model``, ``trainer``,
``compression`` / ``huffman`` (packed format and ratios), ``checkpoint``,
``config``, ``corpus`` and ``cli``.
"""

__version__ = "0.1.0"
