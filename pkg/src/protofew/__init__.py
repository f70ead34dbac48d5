"""protofew: few-shot image classification at desk scale.

Two-stage pipeline: self-supervised multi-view contrastive pretraining of
a convolutional embedding network, then prototypical episodic
meta-learning, plus an evaluation/ablation/cross-domain harness. All
numerics run on a small numpy autodiff core so every reported number is
reproducible from a seed.
"""

__version__ = "0.1.0"
