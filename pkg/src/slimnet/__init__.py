"""slimnet: sparsity training, BN-scale channel pruning, and a benchmark harness for compact CNNs."""

__version__ = "0.1.0"
