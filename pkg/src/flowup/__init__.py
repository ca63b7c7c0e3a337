"""Conditional rectified-flow generation of post-treatment follow-up images.

Subpackages cover the full loop: synthetic phantom cohort (`phantom`), the
conditional velocity network and training (`model`, `train`), few-step Euler
sampling (`sampling`), image-quality and segmentation metrics (`metrics`),
non-rigid registration morphometry (`morpho`), counterfactual grids and
temporal series (`counterfactual`), the evaluation pipeline (`evaluate`), an
HTTP service (`service`), and the command-line entry points (`cli`).
"""

__version__ = "0.1.0"
