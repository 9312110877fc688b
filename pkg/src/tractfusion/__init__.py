"""Streamline classification fusing a geometric point-cloud backbone with endpoint fMRI.

Submodules: :mod:`streamlines`, :mod:`fmri`, :mod:`phantom`, :mod:`dataset`,
:mod:`autonet`, :mod:`backbone`, :mod:`auxiliary`, :mod:`fusion`,
:mod:`evaluation`, :mod:`cli`.
"""

__version__ = "0.1.0"
