"""Counter-based random substreams keyed by (master_seed, t, n, role).

Every random draw in a simulation comes from a Philox generator whose
128-bit key is (master_seed, pack(t, n, role)).  Philox is counter-based,
so two streams with different keys are independent and a stream's output
depends only on its key -- never on allocation order, thread scheduling,
or how many values other streams have consumed.  That is what makes runs
bit-reproducible under FOSGD_THREADS > 1.
"""

from __future__ import annotations

import numpy as np

# role identifiers for the second key word
ROLE_PROBLEM = 0        # problem/instance generation (t = n = 0)
ROLE_GRAD = 1           # worker n draws its stochastic gradient at step t
ROLE_WORKER_BASIS = 2   # worker n draws its sign vector eps at step t
ROLE_WORKER_DITHER = 3  # worker n draws its dither tau at step t
ROLE_SERVER_BASIS = 4   # server draws eps^s at step t (n = 0)
ROLE_SERVER_DITHER = 5  # server draws tau^s at step t (n = 0)

_T_SHIFT = 24
_N_SHIFT = 8
_N_MAX = 1 << (_T_SHIFT - _N_SHIFT)
_ROLE_MAX = 1 << _N_SHIFT
_T_MAX = 1 << (64 - _T_SHIFT)


def pack_key(t: int, n: int, role: int) -> int:
    """Injective packing of (t, n, role) into one 64-bit key word."""
    if not (0 <= t < _T_MAX and 0 <= n < _N_MAX and 0 <= role < _ROLE_MAX):
        raise ValueError(f"substream index out of range: t={t} n={n} role={role}")
    return (t << _T_SHIFT) | (n << _N_SHIFT) | role


def substream(master_seed: int, t: int, n: int, role: int) -> np.random.Generator:
    """Fresh generator for the (t, n, role) substream of master_seed."""
    return np.random.Generator(
        np.random.Philox(key=[master_seed & 0xFFFFFFFFFFFFFFFF, pack_key(t, n, role)])
    )


class SubstreamCache:
    """Reusable Philox generator, re-keyed per draw.

    Re-keying a cached bit generator produces the exact same values as
    constructing substream(master_seed, t, n, role) from scratch, at about
    a quarter of the cost.  One cache per thread; instances are not
    thread-safe.
    """

    def __init__(self, master_seed: int):
        self._seed = master_seed & 0xFFFFFFFFFFFFFFFF
        self._bitgen = np.random.Philox(key=[self._seed, 0])
        self.generator = np.random.Generator(self._bitgen)
        self._state = self._bitgen.state
        self._state["state"]["key"][0] = self._seed

    def rekey(self, t: int, n: int, role: int) -> np.random.Generator:
        st = self._state
        st["state"]["key"][1] = pack_key(t, n, role)
        st["state"]["counter"][:] = 0
        st["buffer_pos"] = 4
        st["has_uint32"] = 0
        st["uinteger"] = 0
        self._bitgen.state = st
        return self.generator
