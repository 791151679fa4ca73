"""Random message generation shared by the protocol tests."""

from __future__ import annotations

import random

from hypothesis import strategies as st

from elasticpf import protocol as pr
from elasticpf.store import ParticleId

U32 = (1 << 32) - 1
U64 = (1 << 64) - 1

_pid = st.builds(ParticleId, st.integers(0, U32), st.integers(0, U32))
_pids = st.lists(_pid, max_size=12).map(tuple)
_f64 = st.floats(allow_nan=False, allow_infinity=False)
_text = st.text(max_size=40)

KINDS = {
    "u8": st.booleans(),
    "u32": st.integers(0, U32),
    "u64": st.integers(0, U64),
    "f64": _f64,
    "str": _text,
    "pid": _pid,
    "pids": _pids,
    "opt_pid": st.none() | _pid,
}


def message_strategy():
    def build(cls):
        fields = {name: KINDS[kind] for name, kind in cls.LAYOUT}
        return st.builds(cls, sender=_text, **fields)
    return st.one_of([build(cls) for cls in pr.MESSAGE_TYPES.values()])


def _rand_value(rng: random.Random, kind: str):
    if kind == "u8":
        return rng.random() < 0.5
    if kind == "u32":
        return rng.choice([0, 1, U32, rng.getrandbits(32)])
    if kind == "u64":
        return rng.choice([0, U64, rng.getrandbits(64)])
    if kind == "f64":
        return rng.choice([0.0, -0.0, 5e-324, 1.7976931348623157e308, rng.uniform(-1e6, 1e6),
                           rng.random()])
    if kind == "str":
        return "".join(chr(rng.choice([rng.randrange(32, 127), rng.randrange(0x80, 0x3000)]))
                       for _ in range(rng.randrange(0, 12)))
    if kind == "pid":
        return ParticleId(rng.getrandbits(32), rng.getrandbits(32))
    if kind == "pids":
        return tuple(_rand_value(rng, "pid") for _ in range(rng.randrange(0, 6)))
    if kind == "opt_pid":
        return None if rng.random() < 0.3 else _rand_value(rng, "pid")
    raise AssertionError(kind)


def random_messages(n: int, seed: int = 0):
    rng = random.Random(seed)
    classes = list(pr.MESSAGE_TYPES.values())
    for _ in range(n):
        cls = rng.choice(classes)
        yield cls(**{name: _rand_value(rng, kind) for name, kind in cls.LAYOUT},
                  sender=_rand_value(rng, "str"))
