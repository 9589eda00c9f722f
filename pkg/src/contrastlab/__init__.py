"""Desk-scale contrastive representation-learning laboratory.

Subpackages and modules:

* :mod:`contrastlab.numerics` - tensors, reverse-mode autodiff, SGD, schedules, seeded RNG
* :mod:`contrastlab.model` - staged encoder, heads, momentum key encoder, key queue, checkpoints
* :mod:`contrastlab.objectives` - CE, SelfSupCon, SupCon and the joint objectives; training loop
* :mod:`contrastlab.data` - synthetic domains, augmentation, corruptions, episodes
* :mod:`contrastlab.evaluation` - linear probe, fine-tune, few-shot, checkpoint curves
* :mod:`contrastlab.analysis` - CKA, calibration, class separation, corruption sweep, PGD
* :mod:`contrastlab.cli` - the ``lab`` command
"""

__version__ = "0.1.0"
