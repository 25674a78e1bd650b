"""Two-stream intrinsic image decomposition toolkit.

Splits an image I into albedo A and shading S with I = A*S, using a pair of
encoder-decoder streams whose features are kept apart by a divergence loss
and anchored by a consistency loss.  Ships the full loss/metric suites, the
Sintel-style dataset refinement pipeline, and a desk-scale trainer.
"""

__version__ = "0.1.0"
