"""Counter-based, splittable random streams.

Every random draw in the package is addressed by coordinates
``(master_seed, step, query, role, index)``.  A stream is a *value*: building
the generator twice from the same coordinates yields the same bits, so
perturbations are regenerated on demand instead of stored.
"""

from dataclasses import dataclass, replace

import numpy as np

# Fixed integer ids; never derive these from hash(), which is salted per process.
ROLES = {
    "u": 0,        # underlying Gaussian perturbation
    "q1": 1,       # rounding stream for the probing copy
    "q2": 2,       # rounding stream for the update-direction copy
    "update": 3,   # stochastic rounding of the weight update
    "batch": 4,    # minibatch sampling
    "init": 5,     # parameter initialisation
    "data": 6,     # synthetic dataset generation
    "quant": 7,    # generic stochastic quantisation
}

_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    master_seed: int
    step: int = 0
    query: int = 0
    role: str = "u"
    index: int = 0

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown rng role {self.role!r}")

    def key(self) -> tuple:
        return (self.step, self.query, ROLES[self.role], self.index)

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.master_seed & _U64, spawn_key=self.key())
        return np.random.Generator(np.random.Philox(seq))

    def at(self, **coords) -> "RngStream":
        return replace(self, **coords)

    def child(self, index: int) -> "RngStream":
        return replace(self, index=index)


def as_stream(seed) -> RngStream:
    if isinstance(seed, RngStream):
        return seed
    return RngStream(int(seed))
