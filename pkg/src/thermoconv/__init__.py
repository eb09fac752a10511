"""thermoconv: a numerical laboratory for thermodynamic convergence of
singularly perturbed diffusions.

Subpackages
-----------
matrix_kit   dense linear algebra and Gaussian integral formulas
criteria     curvature certificates, structural constants, coupling tests
ou_lab       exact Gaussian engine for the slow-fast OU family
sde          Euler-Maruyama engine with reproducible counter randomness
models       nonlinear averaging demo and stiff-potential constraint model
harness      experiment configs, orchestration, verdicts, CSV/JSON output
"""

__version__ = "0.1.0"
