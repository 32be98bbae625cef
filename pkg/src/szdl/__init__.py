"""szdl: schizophrenia vs. control classification from 3D structural MRI.

The toolkit covers the full pipeline at desk scale: NIfTI-1 volume I/O,
synthetic phantom data, a tape-based tensor engine, the SE-VGG-11BN
classifier, MRI-style augmentation, Adam training with subject-level
splits, ROC/AUC/DeLong evaluation, and 3D Grad-CAM explainability.
"""

__version__ = "0.1.0"
