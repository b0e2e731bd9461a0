"""adaseg: desk-scale unsupervised domain adaptation for segmentation.

Two cooperating training modules close the loop between image-space
translation and feature-space alignment: a cycle-consistent translator with
a transferability-weighted variational bottleneck, and a feature augmentor
built from gated attention blocks trained against a feature discriminator,
with pseudo-label self-training on the unlabeled target split.
"""

__version__ = "0.1.0"
