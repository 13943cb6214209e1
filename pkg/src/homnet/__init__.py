"""Structural-abnormality detection for homologous chromosome pairs.

The package covers the whole desk-scale pipeline: converting cropped
chromosome images to gray-mean sequence pairs, synthesizing artificial
structural abnormalities for self-supervised pretraining, a three-block
pair-alignment network with its own reverse-mode tensor engine, Adam
training with layer freezing, and an evaluation harness (AUC/F1, DTW
features, logistic-regression baseline).
"""

__version__ = "0.1.0"
