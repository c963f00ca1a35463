"""Webpage saliency prediction with a two-stage, outline-conditioned GAN.

Built on a small NumPy reverse-mode autodiff core (:mod:`websal.tensor`,
:mod:`websal.nn`). Typical entry points:

- :func:`websal.networks.build_params` / :func:`websal.networks.predict`
- :func:`websal.trainer.train`
- :func:`websal.metrics.cc`, :func:`websal.metrics.nss`
- the ``websal`` command (:mod:`websal.cli`)
"""

__version__ = "0.1.0"
