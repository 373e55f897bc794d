"""pushsim: deterministic simulator for trusted-computing content push.

Library layout:
  crypto      seedable primitives (hash, sign/verify, hybrid envelope)
  tpm         software trust anchor (PCRs, log, seal/unseal, quote)
  privacy_ca  AIK enrollment and binding-key certification
  protocol    actors and the two push state machines
  netsim      topologies, simulated clock, cost model, relay observer
  keystore    JSON persistence for TPM and CA state
  config      run configuration
  runner      run / check / compare engine
  cli         command-line front end
"""

from .config import ConfigError, RunConfig
from .runner import RunReport, check, compare, run

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "RunConfig",
    "RunReport",
    "check",
    "compare",
    "run",
    "__version__",
]
