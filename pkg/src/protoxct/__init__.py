"""Prototype-based defect classification for X-ray CT patches.

Modules
-------
numerics    seeded RNG streams, stable log-sum-exp, gradient clipping
data        synthetic volumes, patch sampling, labelling, splits, file formats
encoder     compact convolutional encoder and embedding standardization
head        prototype head: distances, logits, class pooling, prediction
loss        composite prototype loss with analytic gradients
train       AdamW, plateau schedule, early stopping, training loops
evaluation  metrics, temperature scaling, threshold selection, bootstrap
maps        slice tiling, dense defect maps, majority voting, retrieval
pipeline    end-to-end glue used by the CLI and the tests
suite       fixture checks and head micro-benchmark
"""

__version__ = "0.1.0"
