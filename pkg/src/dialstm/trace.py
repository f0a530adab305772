"""Recorded attention maps: the input to every diagnostic analysis.

A trace stores, per (stage, block, sample), the attention map h_t and
optionally the pooled descriptor y_t that produced it. Two file formats
exist: a CSV (`stage,block,sample,channel,value`) with a sidecar metadata
file, and a compact binary mirroring the checkpoint blob rules.
"""

from __future__ import annotations

import numpy as np

from .checkpoint import read_blob_file, write_blob_file
from .errors import FormatError

TRACE_MAGIC = b"DIATRC01"
TRACE_CSV_HEADER = "stage,block,sample,channel,value"


class AttentionTrace:
    """Per-(stage, block, sample) attention vectors with dense sample keys."""

    def __init__(self):
        self.h: dict[tuple[int, int, int], np.ndarray] = {}
        self.y: dict[tuple[int, int, int], np.ndarray] = {}
        self.stage_widths: dict[int, int] = {}
        self._samples: np.ndarray | None = None

    def set_samples(self, sample_ids) -> None:
        """Declare the dataset indices of the batch about to be recorded."""
        self._samples = np.asarray(sample_ids, dtype=np.int64)

    def record(self, stage: int, block: int, h_batch: np.ndarray,
               y_batch: np.ndarray | None = None) -> None:
        if self._samples is None or len(self._samples) != h_batch.shape[0]:
            raise FormatError("set_samples must declare exactly the batch rows "
                              "before recording")
        width = self.stage_widths.setdefault(stage, h_batch.shape[1])
        if width != h_batch.shape[1]:
            raise FormatError(f"stage {stage} width changed: {width} vs "
                              f"{h_batch.shape[1]}")
        for row, sample in enumerate(self._samples):
            key = (stage, block, int(sample))
            self.h[key] = np.array(h_batch[row], dtype=np.float64)
            if y_batch is not None:
                self.y[key] = np.array(y_batch[row], dtype=np.float64)

    # -- views -------------------------------------------------------------

    def stages(self) -> list[int]:
        return sorted({k[0] for k in self.h})

    def blocks(self, stage: int) -> list[int]:
        return sorted({k[1] for k in self.h if k[0] == stage})

    def samples(self) -> list[int]:
        return sorted({k[2] for k in self.h})

    def vector(self, stage: int, block: int, sample: int) -> np.ndarray:
        return self.h[(stage, block, sample)]

    def validate(self) -> None:
        samples = self.samples()
        if samples and samples != list(range(len(samples))):
            raise FormatError("sample keys must be dense 0..S-1")
        for (stage, _, _), vec in self.h.items():
            if vec.shape != (self.stage_widths[stage],):
                raise FormatError(f"stage {stage} vectors must share one length")


def trace_from_model(model, dataset, batch_size: int = 64,
                     sample_cap: int | None = None) -> AttentionTrace:
    """Run a model over a dataset in eval mode and record every h_t / y_t."""
    from .data import normalize_images
    from .tensor import no_grad

    trace = AttentionTrace()
    count = len(dataset) if sample_cap is None else min(sample_cap, len(dataset))
    with no_grad():
        for start in range(0, count, batch_size):
            idx = np.arange(start, min(start + batch_size, count))
            x = normalize_images(dataset.images[idx], dataset.mean, dataset.std)
            trace.set_samples(idx)
            model.forward(x, training=False, trace=trace)
    return trace


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def _sorted_keys(entries):
    return sorted(entries.keys())


def save_trace_csv(path, trace: AttentionTrace, kind: str = "h") -> None:
    """Write `stage,block,sample,channel,value` rows plus a `.meta` sidecar."""
    entries = trace.h if kind == "h" else trace.y
    lines = [TRACE_CSV_HEADER]
    for (stage, block, sample) in _sorted_keys(entries):
        vec = entries[(stage, block, sample)]
        for channel, value in enumerate(vec):
            lines.append(f"{stage},{block},{sample},{channel},{float(value)!r}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    widths = ",".join(f"{s}:{w}" for s, w in sorted(trace.stage_widths.items()))
    with open(str(path) + ".meta", "w", encoding="utf-8") as f:
        f.write(f"kind={kind}\n"
                f"samples={len(trace.samples())}\n"
                f"stage_widths={widths}\n")


def load_trace_csv(path) -> AttentionTrace:
    trace = AttentionTrace()
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if header != TRACE_CSV_HEADER:
            raise FormatError(f"{path}: expected header {TRACE_CSV_HEADER!r}, "
                              f"got {header!r}")
        rows: dict[tuple[int, int, int], list[tuple[int, float]]] = {}
        for lineno, line in enumerate(f, 2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise FormatError(f"{path}:{lineno}: expected 5 fields")
            stage, block, sample, channel = (int(p) for p in parts[:4])
            rows.setdefault((stage, block, sample), []).append(
                (channel, float(parts[4])))
    for key, cells in rows.items():
        cells.sort()
        vec = np.array([v for _, v in cells], dtype=np.float64)
        trace.h[key] = vec
        trace.stage_widths.setdefault(key[0], len(vec))
    return trace


def save_trace_binary(path, trace: AttentionTrace) -> None:
    """Compact variant following the checkpoint blob rules (f32 storage)."""
    meta = {"format_version": "1",
            "stage_widths": ",".join(f"{s}:{w}" for s, w in
                                     sorted(trace.stage_widths.items()))}
    arrays = {}
    for (stage, block, sample) in _sorted_keys(trace.h):
        arrays[f"h/{stage}/{block}/{sample}"] = \
            trace.h[(stage, block, sample)].astype(np.float32)
    for (stage, block, sample) in _sorted_keys(trace.y):
        arrays[f"y/{stage}/{block}/{sample}"] = \
            trace.y[(stage, block, sample)].astype(np.float32)
    write_blob_file(path, meta, arrays, magic=TRACE_MAGIC)


def load_trace_binary(path) -> AttentionTrace:
    _, arrays = read_blob_file(path, magic=TRACE_MAGIC)
    trace = AttentionTrace()
    for name, arr in arrays.items():
        parts = name.split("/")
        if len(parts) != 4 or parts[0] not in ("h", "y"):
            raise FormatError(f"{path}: unexpected blob name {name!r}")
        key = (int(parts[1]), int(parts[2]), int(parts[3]))
        target = trace.h if parts[0] == "h" else trace.y
        target[key] = arr.astype(np.float64)
        if parts[0] == "h":
            trace.stage_widths.setdefault(key[0], arr.size)
    return trace
