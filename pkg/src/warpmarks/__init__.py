"""warpmarks: unsupervised object-landmark discovery by training a detector
to be equivariant to random thin-plate-spline warps, with a linear regressor
for evaluation against annotated landmarks."""

__version__ = "0.1.0"
