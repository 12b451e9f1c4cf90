"""offseg: a dual-branch offset-learning segmentation head at desk scale.

The package contains the head itself (baseline per-pixel classifier and the
offset variant), a minimal reverse-mode gradient layer with a finite-difference
checker, ideal-prototype mining, synthetic pixel-classification tasks with a
provable static-classifier ceiling, a small training stack (AdamW, poly
schedule, mIoU metrics), and a reproducible CLI.
"""

__version__ = "0.1.0"
