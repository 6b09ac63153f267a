"""Feature bundles: the per-example h and g vectors that leave a site.

File layout (EFB1): magic, u32 header length, JSON header (site id, roster,
k, p, n_aug, counts, split), then fixed-stride little-endian f64 records
``[example, aug, label, patient, h_1..h_D, g_1..g_D]``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError

MAGIC = b"EFB1"
_META_COLS = 4


@dataclass
class FeatureBundle:
    site_id: str
    roster: list[str]
    split: str
    n_aug: int
    example: np.ndarray  # (R,) example index within the split
    aug: np.ndarray  # (R,)
    labels: np.ndarray  # (R,) global ids
    patients: np.ndarray  # (R,)
    h: np.ndarray  # (R, D, k)
    g: np.ndarray  # (R, D, p)

    def __post_init__(self):
        r = len(self.labels)
        if self.h.shape[:2] != (r, len(self.roster)) or self.g.shape[:2] != (r, len(self.roster)):
            raise DataError(
                f"bundle {self.site_id}: vectors {self.h.shape}/{self.g.shape} do not cover roster {self.roster}"
            )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def k(self) -> int:
        return self.h.shape[2]

    @property
    def p(self) -> int:
        return self.g.shape[2]

    @property
    def n_examples(self) -> int:
        return len(np.unique(self.example))

    def select(self, roster: Sequence[str]) -> "FeatureBundle":
        """Restrict to a sub-roster, in the given order."""
        missing = [e for e in roster if e not in self.roster]
        if missing:
            raise DataError(f"bundle {self.site_id} has no vectors for experts {missing}")
        idx = [self.roster.index(e) for e in roster]
        return FeatureBundle(self.site_id, list(roster), self.split, self.n_aug, self.example, self.aug,
                             self.labels, self.patients, self.h[:, idx], self.g[:, idx])

    # ------------------------------------------------------------ bytes
    def to_bytes(self) -> bytes:
        header = json.dumps({
            "site_id": self.site_id, "roster": self.roster, "split": self.split, "k": self.k,
            "p": self.p, "n_aug": self.n_aug, "n_examples": self.n_examples, "n_rows": len(self),
        }).encode()
        r = len(self)
        rec = np.concatenate([
            np.stack([self.example, self.aug, self.labels, self.patients], axis=1).astype("<f8"),
            self.h.reshape(r, -1), self.g.reshape(r, -1),
        ], axis=1).astype("<f8")
        return MAGIC + struct.pack("<I", len(header)) + header + rec.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FeatureBundle":
        if blob[:4] != MAGIC:
            raise DataError(f"not an EFB1 bundle (magic {blob[:4]!r})")
        (hlen,) = struct.unpack_from("<I", blob, 4)
        h = json.loads(blob[8:8 + hlen])
        d = len(h["roster"])
        stride = _META_COLS + d * (h["k"] + h["p"])
        body = blob[8 + hlen:]
        if len(body) != 8 * stride * h["n_rows"]:
            raise DataError("bundle payload length does not match its header")
        rec = np.frombuffer(body, dtype="<f8").reshape(h["n_rows"], stride).astype(np.float64)
        hk = _META_COLS + d * h["k"]
        return cls(
            h["site_id"], list(h["roster"]), h["split"], h["n_aug"],
            rec[:, 0].astype(np.int64), rec[:, 1].astype(np.int64), rec[:, 2].astype(np.int64),
            rec[:, 3].astype(np.int64),
            rec[:, _META_COLS:hk].reshape(-1, d, h["k"]), rec[:, hk:].reshape(-1, d, h["p"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "FeatureBundle":
        return cls.from_bytes(Path(path).read_bytes())


def merge(bundles: Sequence[FeatureBundle], roster: Sequence[str]) -> FeatureBundle:
    """Stack several bundles (possibly from different sites) over a common roster."""
    if not bundles:
        raise DataError("no bundles to merge")
    parts = [b.select(roster) for b in bundles]
    cat = lambda name: np.concatenate([getattr(b, name) for b in parts])  # noqa: E731
    return FeatureBundle("+".join(b.site_id for b in parts), list(roster), parts[0].split,
                         parts[0].n_aug, cat("example"), cat("aug"), cat("labels"), cat("patients"),
                         cat("h"), cat("g"))
