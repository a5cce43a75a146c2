"""Golden regression fixtures shipped under ``data/v1``.

Run ``python -m cafpn.fixtures`` to regenerate them; the digests in
``SHA256SUMS`` are rewritten at the same time.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from . import tnsr
from .attention import lt_bruteforce
from .gcem import GcemConfig, gcem_forward, init_gcem

DATA_DIR = Path(__file__).parent / "data" / "v1"
DIGESTS = "SHA256SUMS"
GCEM_NORMS = "gcem_block_norms.tnsr"
LT_CASE = ("lt_case_q.tnsr", "lt_case_k.tnsr", "lt_case_v.tnsr", "lt_case_out.tnsr")


class FixtureError(RuntimeError):
    def __init__(self, name: str, message: str):
        super().__init__(f"fixture {name}: {message}")
        self.fixture = name


def gcem_block_norms(seed: int = 2024) -> np.ndarray:
    """Frobenius norm of each block output for a seeded 1x512x8x8 run."""
    rng = np.random.default_rng(seed)
    config = GcemConfig(in_channels=512)
    blocks = init_gcem(rng, config)
    topmost = rng.standard_normal((1, 512, 8, 8))
    trace: list = []
    gcem_forward(topmost, config, blocks, trace=trace)
    return np.array([np.linalg.norm(t["output"]) for t in trace])


def lt_case(seed: int = 7) -> tuple[np.ndarray, ...]:
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((6, 9))
    k = rng.standard_normal((6, 11))
    v = rng.standard_normal((5, 11))
    return q, k, v, lt_bruteforce(q, k, v)


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def generate(directory: Path = DATA_DIR) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    tnsr.save(directory / GCEM_NORMS, gcem_block_norms())
    for name, arr in zip(LT_CASE, lt_case()):
        tnsr.save(directory / name, arr)
    names = [GCEM_NORMS, *LT_CASE]
    (directory / DIGESTS).write_text("".join(f"{_digest(directory / n)}  {n}\n" for n in names))


def load_verified(name: str, directory: Path = DATA_DIR) -> np.ndarray:
    """Load a fixture after checking its recorded SHA-256 digest."""
    directory = Path(directory)
    sums = {}
    for line in (directory / DIGESTS).read_text().splitlines():
        if line.strip():
            digest, fname = line.split()
            sums[fname] = digest
    path = directory / name
    if name not in sums:
        raise FixtureError(name, "no recorded digest")
    if not path.exists():
        raise FixtureError(name, "file missing")
    if _digest(path) != sums[name]:
        raise FixtureError(name, "digest mismatch, file was modified")
    try:
        return tnsr.load(path)
    except tnsr.TnsrError as exc:
        raise FixtureError(name, str(exc)) from exc


if __name__ == "__main__":
    generate()
    print(f"wrote fixtures to {DATA_DIR}")
