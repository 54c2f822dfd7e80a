"""Memory bank: trainable procedure embeddings appended to the vocabulary.

Row ``i`` of the bank is invoked by token id ``vocab_size + i``.  In the
coupled variant one matrix serves both as the output-head address (routing)
and as the input embedding (steering); the decoupled variant keeps two
matrices and only the address rows are renormalized.
"""
from __future__ import annotations

import struct
import warnings
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import CorruptFormatError, InputError

COUPLED = "coupled"
DECOUPLED = "decoupled"
VARIANTS = (COUPLED, DECOUPLED)

BANK_MAGIC = b"TKMBANK\x00"
BANK_VERSION = 1
_HEADER = struct.Struct("<8sIIIIBdd")

DEFAULT_EPS = 1e-8
DEFAULT_JITTER = 1e-3


class MemoryBank:
    """l x d memory matrix (or address/steer pair) with active/inactive bookkeeping.

    ``active`` holds the indices of rows currently being trained; every other
    row is inactive.  The mean norm of inactive rows is cached when the bank is
    constructed, because inactive rows are never written afterwards; this keeps
    :func:`renormalize` proportional to the active set only.
    """

    def __init__(
        self,
        vocab_size: int,
        addr: torch.Tensor,
        steer: torch.Tensor | None = None,
        labels: Sequence[str] | None = None,
        active: Iterable[int] | None = None,
        eps: float = DEFAULT_EPS,
        init_norm: float = 0.0,
    ):
        if addr.dim() != 2:
            raise InputError(f"bank rows must be a matrix, got shape {tuple(addr.shape)}")
        l = addr.shape[0]
        self.variant = COUPLED if steer is None else DECOUPLED
        if steer is not None and steer.shape != addr.shape:
            raise InputError(f"steer shape {tuple(steer.shape)} != address shape {tuple(addr.shape)}")
        self.vocab_size = int(vocab_size)
        self.addr = addr
        self.steer = addr if steer is None else steer
        self.labels = list(labels) if labels is not None else [f"mem{i}" for i in range(l)]
        if len(self.labels) != l:
            raise InputError(f"{len(self.labels)} labels for {l} rows")
        if len(set(self.labels)) != l:
            raise InputError("bank labels must be unique")
        self.active = set(range(l)) if active is None else {int(i) for i in active}
        if any(i < 0 or i >= l for i in self.active):
            raise InputError("active index out of range")
        self.eps = float(eps)
        self.init_norm = float(init_norm)
        self.stats = {"renorm_row_reads": 0, "renorm_row_writes": 0}
        if not torch.isfinite(self.addr).all() or not torch.isfinite(self.steer).all():
            raise InputError("bank rows must be finite")
        inactive = self.inactive_indices
        if inactive:
            idx = torch.tensor(inactive, dtype=torch.long)
            with torch.no_grad():
                self.inactive_norm = torch.linalg.vector_norm(self.addr[idx], dim=1).mean().item()
        else:
            self.inactive_norm = None

    @property
    def size(self) -> int:
        return self.addr.shape[0]

    @property
    def dim(self) -> int:
        return self.addr.shape[1]

    @property
    def rows(self) -> torch.Tensor:
        return self.addr

    @property
    def decoupled(self) -> bool:
        return self.variant == DECOUPLED

    @property
    def token_ids(self) -> list[int]:
        return list(range(self.vocab_size, self.vocab_size + self.size))

    @property
    def active_indices(self) -> list[int]:
        return sorted(self.active)

    @property
    def inactive_indices(self) -> list[int]:
        return [i for i in range(self.size) if i not in self.active]

    def parameters(self) -> list[torch.Tensor]:
        return [self.addr] if not self.decoupled else [self.addr, self.steer]

    def token_id(self, label: str) -> int:
        return self.vocab_size + self.labels.index(label)

    def clone(self) -> "MemoryBank":
        with torch.no_grad():
            addr = self.addr.detach().clone()
            steer = self.steer.detach().clone() if self.decoupled else None
        return MemoryBank(self.vocab_size, addr, steer, self.labels, self.active, self.eps, self.init_norm)

    def equals(self, other: "MemoryBank") -> bool:
        """Bitwise equality of rows and bookkeeping."""
        return (
            self.vocab_size == other.vocab_size
            and self.variant == other.variant
            and self.labels == other.labels
            and self.active == other.active
            and self.eps == other.eps
            and self.init_norm == other.init_norm
            and self.addr.shape == other.addr.shape
            and torch.equal(self.addr, other.addr)
            and torch.equal(self.steer, other.steer)
        )

    def __repr__(self) -> str:
        return f"MemoryBank(l={self.size}, d={self.dim}, variant={self.variant}, active={len(self.active)})"


def _embedding_table(init_source) -> torch.Tensor:
    table = getattr(init_source, "tok_emb", init_source)
    if not isinstance(table, torch.Tensor) or table.dim() != 2:
        raise InputError("init_source must be a backbone or an embedding matrix")
    return table.detach()


def _init_rows(table: torch.Tensor, n: int, gen: torch.Generator, jitter: float) -> torch.Tensor:
    mean = table.mean(dim=0)
    scale = jitter * torch.linalg.vector_norm(mean).item()
    noise = torch.randn(n, table.shape[1], generator=gen, dtype=torch.float64).to(table.dtype)
    return mean.unsqueeze(0).repeat(n, 1) + scale * noise


def create_bank(
    d: int,
    n: int,
    init_source,
    seed: int = 0,
    variant: str = COUPLED,
    labels: Sequence[str] | None = None,
    jitter: float = DEFAULT_JITTER,
    eps: float = DEFAULT_EPS,
) -> MemoryBank:
    """New bank of ``n`` rows, each the mean vocabulary embedding plus small Gaussian jitter."""
    if n < 0:
        raise InputError("n must be >= 0")
    if variant not in VARIANTS:
        raise InputError(f"unknown bank variant {variant!r}")
    table = _embedding_table(init_source)
    if table.shape[1] != d:
        raise InputError(f"embedding width {table.shape[1]} does not match bank width {d}")
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        addr = _init_rows(table, n, gen, jitter)
        steer = _init_rows(table, n, gen, jitter) if variant == DECOUPLED else None
        init_norm = torch.linalg.vector_norm(addr, dim=1).mean().item() if n else 0.0
    return MemoryBank(table.shape[0], addr, steer, labels, range(n), eps, init_norm)


def extend_bank(
    bank: MemoryBank,
    n_new: int,
    init_source,
    labels: Sequence[str] | None = None,
    seed: int = 0,
    jitter: float = DEFAULT_JITTER,
) -> tuple[MemoryBank, list[int]]:
    """Append ``n_new`` active rows; previously active rows become inactive.

    Existing rows are copied bitwise.  Returns the new bank and the token ids
    of the appended rows.
    """
    if n_new < 0:
        raise InputError("n_new must be >= 0")
    table = _embedding_table(init_source)
    if table.shape[1] != bank.dim:
        raise InputError(f"embedding width {table.shape[1]} does not match bank width {bank.dim}")
    l = bank.size
    if labels is None:
        labels = [f"mem{i}" for i in range(l, l + n_new)]
    if len(labels) != n_new:
        raise InputError(f"{len(labels)} labels for {n_new} new rows")
    # mix the current size into the seed so successive extensions draw fresh jitter
    gen = torch.Generator().manual_seed(int(seed) * 1_000_003 + l)
    with torch.no_grad():
        new_addr = _init_rows(table, n_new, gen, jitter).to(bank.addr.dtype)
        addr = torch.cat([bank.addr.detach().clone(), new_addr], dim=0)
        steer = None
        if bank.decoupled:
            new_steer = _init_rows(table, n_new, gen, jitter).to(bank.steer.dtype)
            steer = torch.cat([bank.steer.detach().clone(), new_steer], dim=0)
    init_norm = bank.init_norm
    if l == 0 and n_new:
        init_norm = torch.linalg.vector_norm(new_addr, dim=1).mean().item()
    out = MemoryBank(
        bank.vocab_size, addr, steer, list(bank.labels) + list(labels), range(l, l + n_new), bank.eps, init_norm
    )
    return out, list(range(bank.vocab_size + l, bank.vocab_size + l + n_new))


def reference_norm(bank: MemoryBank, fallback: str = "init") -> float | None:
    """Target scale for active rows: mean inactive-row norm, else the fallback.

    ``fallback`` is ``"init"`` (mean row norm at bank creation) or ``"none"``
    (skip renormalization while no row is inactive).
    """
    if bank.inactive_norm is not None:
        return bank.inactive_norm
    if fallback == "init":
        return bank.init_norm
    if fallback == "none":
        return None
    raise InputError(f"unknown renormalization fallback {fallback!r}")


def renormalize(bank: MemoryBank, eps: float | None = None, fallback: str = "init") -> MemoryBank:
    """Rescale active address rows to the prevailing inactive scale, in place.

    Each active row ``m`` becomes ``m * ref / (||m|| + eps)``.  Inactive rows
    and, in the decoupled variant, all steer rows are left untouched.  Rows with
    zero norm are skipped with a warning.  Returns ``bank`` for chaining.
    """
    eps = bank.eps if eps is None else float(eps)
    active = bank.active_indices
    if not active:
        return bank
    ref = reference_norm(bank, fallback)
    if ref is None:
        return bank
    idx = torch.tensor(active, dtype=torch.long)
    with torch.no_grad():
        rows = bank.addr.index_select(0, idx)
        bank.stats["renorm_row_reads"] += len(active)
        norms = torch.linalg.vector_norm(rows, dim=1)
        zero = norms == 0
        if zero.any():
            warnings.warn(
                f"renormalize: leaving {int(zero.sum())} zero-norm active row(s) unchanged",
                RuntimeWarning,
                stacklevel=2,
            )
        scale = torch.where(zero, torch.ones_like(norms), ref / (norms + eps))
        bank.addr.index_copy_(0, idx, rows * scale.unsqueeze(1))
        bank.stats["renorm_row_writes"] += len(active)
    return bank


def write_bank(bank: MemoryBank, path: str | Path) -> Path:
    """Serialize to the TKMBANK format.

    Layout (little-endian): magic ``TKMBANK\\0``; u32 version; u32 vocab_size;
    u32 l; u32 d; u8 variant (0 coupled, 1 decoupled); f64 eps; f64 init_norm;
    l*d f32 address rows (row-major), then l*d f32 steer rows when decoupled;
    per label a u32 byte length followed by UTF-8 bytes; l bytes of active
    flags (1 = active, 0 = inactive).
    """
    path = Path(path)
    header = _HEADER.pack(
        BANK_MAGIC,
        BANK_VERSION,
        bank.vocab_size,
        bank.size,
        bank.dim,
        1 if bank.decoupled else 0,
        bank.eps,
        bank.init_norm,
    )
    chunks = [header, _f32_bytes(bank.addr)]
    if bank.decoupled:
        chunks.append(_f32_bytes(bank.steer))
    for label in bank.labels:
        raw = label.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
    chunks.append(bytes(1 if i in bank.active else 0 for i in range(bank.size)))
    try:
        path.write_bytes(b"".join(chunks))
    except OSError as exc:
        raise OSError(f"cannot write bank to {path}: {exc}") from exc
    return path


def read_bank(path: str | Path) -> MemoryBank:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read bank from {path}: {exc}") from exc
    if len(data) < _HEADER.size:
        raise CorruptFormatError(f"{path}: truncated header")
    magic, version, vocab_size, l, d, variant, eps, init_norm = _HEADER.unpack_from(data, 0)
    if magic != BANK_MAGIC:
        raise CorruptFormatError(f"{path}: bad magic {magic!r}")
    if version != BANK_VERSION:
        raise CorruptFormatError(f"{path}: unsupported bank version {version}")
    if variant not in (0, 1):
        raise CorruptFormatError(f"{path}: bad variant flag {variant}")
    off = _HEADER.size
    addr, off = _take_f32(data, off, l, d, path)
    steer = None
    if variant == 1:
        steer, off = _take_f32(data, off, l, d, path)
    labels = []
    for _ in range(l):
        if off + 4 > len(data):
            raise CorruptFormatError(f"{path}: truncated label table")
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        if off + n > len(data):
            raise CorruptFormatError(f"{path}: truncated label table")
        try:
            labels.append(data[off : off + n].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise CorruptFormatError(f"{path}: label is not UTF-8") from exc
        off += n
    if off + l != len(data):
        raise CorruptFormatError(f"{path}: expected {l} active flags, found {len(data) - off} bytes")
    flags = data[off:]
    if any(f not in (0, 1) for f in flags):
        raise CorruptFormatError(f"{path}: bad active flag")
    active = [i for i, f in enumerate(flags) if f == 1]
    try:
        return MemoryBank(vocab_size, addr, steer, labels, active, eps, init_norm)
    except InputError as exc:
        raise CorruptFormatError(f"{path}: {exc}") from exc


def _f32_bytes(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()


def _take_f32(data: bytes, off: int, l: int, d: int, path: Path) -> tuple[torch.Tensor, int]:
    n = 4 * l * d
    if off + n > len(data):
        raise CorruptFormatError(f"{path}: truncated row data")
    arr = np.frombuffer(data, dtype="<f4", count=l * d, offset=off).astype(np.float32).reshape(l, d)
    return torch.from_numpy(arr.copy()), off + n
