"""Respiratory-sound classification pipeline.

Gammatone-spectrogram front end, CNN-MoE and C-RNN classifiers trained
from scratch, probability-mean ensembling, and a 5-fold evaluation harness
computing specificity, sensitivity and their mean score.
"""

__version__ = "0.1.0"
