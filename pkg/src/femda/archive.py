"""Per-step state archives used as synthetic truth for assimilation runs."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ArchiveError

STATES_FILE = "states.npy"
INDEX_FILE = "index.csv"
MANIFEST_FILE = "manifest.json"


class StateArchive:
    """Full nodal states stored at every step; lookup is by exact time only.

    ``time_tol`` absorbs round-off from accumulating ``t += dt``; asking for a
    time between stored steps raises :class:`ArchiveError` rather than
    interpolating.
    """

    def __init__(self, manifest=None, time_tol=1e-9):
        self.manifest = dict(manifest or {})
        self.time_tol = time_tol
        self._steps = []
        self._times = []
        self._states = []
        self._frozen = None

    def __len__(self):
        return len(self._times)

    def append(self, step, t, state):
        if self._times and t <= self._times[-1]:
            raise ArchiveError("archive times must increase")
        try:
            self._states.append(np.array(state, dtype=float, copy=True))
        except MemoryError as exc:
            raise ArchiveError(f"out of memory while storing step {step} ({len(self)} steps stored)") from exc
        self._steps.append(int(step))
        self._times.append(float(t))
        self._frozen = None

    @property
    def times(self):
        return np.array(self._times)

    @property
    def steps(self):
        return np.array(self._steps)

    def _index(self, t):
        times = self.times
        if len(times) == 0:
            raise ArchiveError("archive is empty")
        i = int(np.argmin(np.abs(times - t)))
        if abs(times[i] - t) > self.time_tol * max(1.0, abs(t)):
            raise ArchiveError(f"no stored state at t={t!r}; nearest is t={times[i]!r} (no interpolation in time)")
        return i

    def lookup(self, t):
        return self._states[self._index(t)]

    def at_step(self, step):
        try:
            return self._states[self._steps.index(int(step))]
        except ValueError:
            raise ArchiveError(f"step {step} not stored") from None

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        np.save(d / STATES_FILE, np.array(self._states))
        lines = ["step,t"] + [f"{s},{t!r}" for s, t in zip(self._steps, self._times)]
        (d / INDEX_FILE).write_text("\n".join(lines) + "\n")
        (d / MANIFEST_FILE).write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")
        return [d / STATES_FILE, d / INDEX_FILE, d / MANIFEST_FILE]

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        if not (d / STATES_FILE).exists():
            raise ArchiveError(f"no archive in {d}")
        manifest = json.loads((d / MANIFEST_FILE).read_text())
        rows = (d / INDEX_FILE).read_text().split()[1:]
        states = np.load(d / STATES_FILE)
        out = cls(manifest)
        for row, s in zip(rows, states):
            step, t = row.split(",")
            out.append(int(step), float(t), s)
        return out

    def check_compatible(self, **expected):
        """Raise unless every given manifest entry matches (floats compared to 1e-12)."""
        for key, val in expected.items():
            have = self.manifest.get(key)
            ok = np.isclose(have, val, rtol=1e-12, atol=0) if isinstance(val, float) and have is not None else have == val
            if not ok:
                raise ArchiveError(f"archive {key}={have!r} incompatible with requested {val!r}")
