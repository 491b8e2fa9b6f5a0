"""Learning dynamical systems from partial, noisy observations.

Submodules: :mod:`adcore` (autodiff and RNG), :mod:`systems` (benchmark
systems), :mod:`observation` (operators, noise, datasets), :mod:`prior`
(generative model), :mod:`inference` (EnKS and recurrent posteriors),
:mod:`training` (objectives and drivers), :mod:`metrics` and :mod:`cli`.
"""

__version__ = "0.1.0"
