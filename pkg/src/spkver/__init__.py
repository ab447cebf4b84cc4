"""Speaker-verification toolkit: RepVGG re-parameterization, MQMHA pooling,
subcenter margin losses with Inter-TopK, chain augmentation and an
AS-Norm/QMF scoring back-end."""

__version__ = "0.1.0"
