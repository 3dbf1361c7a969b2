"""semixlab: semi-supervised ordinal image grading lab.

Mixup-based in-/out-of-manifold consistency training with a Siamese CNN,
baseline SSL objectives, preprocessing, metrics, and a chunked signed-rank
comparison protocol — runnable end to end on synthetic ordinal data.
"""

__version__ = "0.1.0"
