"""Binary molecular communication with reactive signaling molecules.

Subpackages:

* :mod:`reactmc.params`    -- system parameters, schedules, config I/O
* :mod:`reactmc.solver`    -- deterministic radial reaction-diffusion solver
* :mod:`reactmc.particle`  -- stochastic particle-based reference simulator
* :mod:`reactmc.detectors` -- Poisson ML and threshold symbol detectors
* :mod:`reactmc.harness`   -- Monte-Carlo BER experiments and PMF validation
* :mod:`reactmc.cli`       -- ``reactmc`` command-line front end
"""

__version__ = "0.1.0"
