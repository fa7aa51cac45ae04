"""Graph-masked temporal convolutions for multivariate time series.

Submodules: ``graph`` (adjacency and hop masks), ``tensor`` (series arrays
and RNG), ``layers`` (forward/backward primitives), ``models`` (SCNN, TCNN,
SCAE assembly and checkpoints), ``optim`` (ADAM, L1, training loops),
``data`` (CSV, splits, windows, synthetic series), ``analysis`` (metrics,
recurrence, sparsity, heatmaps) and ``cli``.
"""

__version__ = "0.1.0"
