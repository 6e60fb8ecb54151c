"""Target-trial emulation from observational cohorts.

Builds a matched sub-cohort that reproduces a target randomized trial's
outcome and covariate profile, fits cost-sensitive counterfactual outcome
models, distills them into an interpretable treatment-policy tree, and
validates the recommended subgroups with survival statistics.
"""

__version__ = "0.1.0"
