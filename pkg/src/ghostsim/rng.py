"""Counter-based random streams.

Every stochastic quantity in the package is drawn from a Philox generator
whose key is built from the master seed and a purpose tag and whose counter
is offset by an integer index (frame number, time segment, ...). A stream is
therefore a pure function of ``(master_seed, tag, index)``: it does not
depend on what else was drawn before it, or on which worker drew it.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_word(tag: str) -> int:
    digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def keyed_generator(master_seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Return the generator for stream ``tag`` at position ``index``.

    The index occupies the upper 128 bits of the 256-bit Philox counter, so
    streams for different indices never overlap unless one of them draws more
    than 2**128 blocks.
    """
    if index < 0:
        raise ValueError("stream index must be non-negative")
    key = (int(master_seed) & _MASK64) | (_tag_word(tag) << 64)
    counter = (int(index) & ((1 << 128) - 1)) << 128
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def bulk_generator(master_seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """A faster SFC64 generator seeded from the keyed stream.

    Used where tens of millions of uniforms are drawn per stream; it is as
    reproducible as :func:`keyed_generator` for the same arguments.
    """
    words = keyed_generator(master_seed, tag, index).bit_generator.random_raw(4)
    return np.random.Generator(np.random.SFC64(np.random.SeedSequence([int(w) for w in words])))
