"""transferlab: layer transfer experiments on small convolutional networks.

The package trains little image classifiers from scratch, performs layer
surgery between them (copying, freezing, randomizing the first n weight
layers), runs treatment grids over dataset splits, and aggregates the
results into transferability reports.
"""

__version__ = "0.1.0"
