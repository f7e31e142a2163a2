"""Watermark records: Arnold-scrambled pair bitmaps, overlap verification, calibration.

A watermark is the set of K selected patch pairs. For storage the set becomes a
binary indicator over all C(P,2) canonical pair ranks, zero-padded to the
smallest square grid, scrambled with a keyed Arnold map, bit-packed row-major
MSB-first, and hex-encoded into a JSON record. Decryption inverts the map and
rejects grids whose one-bits violate the record structure (wrong-key heuristic).
"""

from __future__ import annotations

import json
import math
import os
import time
import zlib
from dataclasses import dataclass
from fractions import Fraction
from hashlib import sha256
from pathlib import Path

import numpy as np

from .relational import PairIndexSet

RECORD_VERSION = 1
RECORD_SUFFIX = ".rzw"


class DecryptError(ValueError):
    """Structural decrypt failure: wrong key or mangled cipher payload."""


class CorruptRecordError(ValueError):
    """Stored record failed its integrity check (CRC/JSON/shape)."""


class MissingRecordError(LookupError):
    """No record stored under the requested content id."""


def pair_index(i: int, j: int, P: int) -> int:
    """Lexicographic rank of the canonical pair (i, j) among all C(P,2) pairs."""
    if not 0 <= i < j < P:
        raise ValueError(f"require 0 <= i < j < P, got ({i}, {j}) with P={P}")
    return i * P - i * (i + 1) // 2 + (j - i - 1)


def pair_from_index(k: int, P: int) -> tuple[int, int]:
    """Inverse of pair_index."""
    m = P * (P - 1) // 2
    if not 0 <= k < m:
        raise ValueError(f"rank {k} out of range [0, {m})")
    # row starts are monotone; find i with start(i) <= k < start(i+1)
    i = 0
    while pair_index(i, i + 1, P) + (P - i - 2) < k:
        i += 1
    j = k - pair_index(i, i + 1, P) + i + 1
    return i, j


def grid_side_for(P: int) -> int:
    """Smallest square side N_g with N_g^2 >= C(P,2)."""
    return math.isqrt(P * (P - 1) // 2 - 1) + 1 if P >= 2 else 1


@dataclass(frozen=True)
class ArnoldKey:
    """Secret parameters (p, q, T) of the Arnold scramble on an N_g x N_g grid.

    The map matrix [[1, p], [q, 1]] must be invertible mod N_g, i.e.
    gcd((1 - p*q) mod N_g, N_g) = 1, otherwise the scramble would not be a
    bijection on cells.
    """

    p: int
    q: int
    T: int
    N_g: int

    def __post_init__(self) -> None:
        if self.T < 1:
            raise ValueError("iteration count T must be >= 1")
        if self.N_g < 1:
            raise ValueError("grid side N_g must be >= 1")
        det = (1 - self.p * self.q) % self.N_g
        if math.gcd(det, self.N_g) != 1:
            raise ValueError(
                f"invalid key: gcd((1 - p*q) mod N_g, N_g) = "
                f"{math.gcd(det, self.N_g)} != 1 for p={self.p}, q={self.q}, "
                f"N_g={self.N_g}"
            )


def _arnold_apply(grid: np.ndarray, a: int, b: int, c: int, d: int, T: int) -> np.ndarray:
    """Apply (x, y) -> (a*x + b*y, c*x + d*y) mod N to all cells, T times.

    Grids are indexed grid[y, x]; cell rank k maps to x = k % N, y = k // N.
    """
    n = grid.shape[0]
    ys, xs = np.indices((n, n))
    x2 = (a * xs + b * ys) % n
    y2 = (c * xs + d * ys) % n
    out = grid
    for _ in range(T):
        nxt = np.empty_like(out)
        nxt[y2, x2] = out[ys, xs]
        out = nxt
    return out


def arnold_forward(grid: np.ndarray, key: ArnoldKey) -> np.ndarray:
    """Scramble: each cell (x, y) moves to ((x + p*y) mod N, (q*x + y) mod N)."""
    grid = np.asarray(grid)
    if grid.shape != (key.N_g, key.N_g):
        raise ValueError(f"grid shape {grid.shape} does not match N_g={key.N_g}")
    return _arnold_apply(grid, 1, key.p, key.q, 1, key.T)


def arnold_inverse(grid: np.ndarray, key: ArnoldKey) -> np.ndarray:
    """Undo arnold_forward with the same key."""
    grid = np.asarray(grid)
    if grid.shape != (key.N_g, key.N_g):
        raise ValueError(f"grid shape {grid.shape} does not match N_g={key.N_g}")
    n = key.N_g
    det_inv = pow((1 - key.p * key.q) % n, -1, n)
    a = det_inv % n
    b = (-key.p * det_inv) % n
    c = (-key.q * det_inv) % n
    d = det_inv % n
    return _arnold_apply(grid, a, b, c, d, key.T)


@dataclass(frozen=True)
class WatermarkRecord:
    """Encrypted pair-indicator bitmap plus the metadata needed to verify it."""

    P: int
    K: int
    N_g: int
    patch_side: int
    image_side: int
    feature_source: str
    cipher_bits: str
    content_id: str
    created: int
    version: int = RECORD_VERSION

    @property
    def M(self) -> int:
        return self.P * (self.P - 1) // 2

    def __post_init__(self) -> None:
        if self.N_g * self.N_g < self.M:
            raise ValueError(f"N_g={self.N_g} grid cannot hold M={self.M} ranks")
        expected = (self.N_g * self.N_g + 7) // 8 * 2
        if len(self.cipher_bits) != expected:
            raise ValueError(
                f"cipher payload length {len(self.cipher_bits)} != expected {expected}"
            )

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "P": self.P,
            "K": self.K,
            "M": self.M,
            "N_g": self.N_g,
            "patch_side": self.patch_side,
            "image_side": self.image_side,
            "feature_source": self.feature_source,
            "cipher_bits": self.cipher_bits,
            "content_id": self.content_id,
            "created": self.created,
        }


def _canonical_json(fields: dict) -> bytes:
    return json.dumps(fields, sort_keys=True, separators=(",", ":")).encode("utf-8")


def record_to_json(record: WatermarkRecord) -> bytes:
    """Serialize with a trailing crc32 over the canonical form of the other fields."""
    fields = record.to_dict()
    crc = zlib.crc32(_canonical_json(fields)) & 0xFFFFFFFF
    fields["crc32"] = f"{crc:08x}"
    return _canonical_json(fields) + b"\n"


def record_from_json(data: bytes) -> WatermarkRecord:
    try:
        fields = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptRecordError(f"record is not valid JSON: {exc}") from exc
    if not isinstance(fields, dict) or "crc32" not in fields:
        raise CorruptRecordError("record missing crc32 field")
    stored_crc = fields.pop("crc32")
    crc = zlib.crc32(_canonical_json(fields)) & 0xFFFFFFFF
    if stored_crc != f"{crc:08x}":
        raise CorruptRecordError(
            f"CRC mismatch: stored {stored_crc}, computed {crc:08x}"
        )
    m_stored = fields.pop("M", None)
    try:
        record = WatermarkRecord(**fields)
    except (TypeError, ValueError) as exc:
        raise CorruptRecordError(f"bad record fields: {exc}") from exc
    if m_stored != record.M:
        raise CorruptRecordError(f"M={m_stored} inconsistent with P={record.P}")
    return record


def _record_created() -> int:
    sde = os.environ.get("SOURCE_DATE_EPOCH")
    return int(sde) if sde is not None else int(time.time())


def encrypt(
    pairs: PairIndexSet,
    key: ArnoldKey,
    *,
    content_id: str = "",
    patch_side: int = 16,
    image_side: int = 224,
    feature_source: str = "mean_rgb",
) -> WatermarkRecord:
    """Build the indicator grid for the pair set, scramble it, and pack a record."""
    P = pairs.P
    n_g = grid_side_for(P)
    if key.N_g != n_g:
        raise ValueError(f"key grid side {key.N_g} != ceil(sqrt(C(P,2))) = {n_g}")
    flat = np.zeros(n_g * n_g, dtype=np.uint8)
    for i, j in pairs.pairs:
        flat[pair_index(i, j, P)] = 1
    scrambled = arnold_forward(flat.reshape(n_g, n_g), key)
    payload = np.packbits(scrambled.reshape(-1), bitorder="big").tobytes()
    return WatermarkRecord(
        P=P,
        K=len(pairs),
        N_g=n_g,
        patch_side=patch_side,
        image_side=image_side,
        feature_source=feature_source,
        cipher_bits=payload.hex(),
        content_id=content_id,
        created=_record_created(),
    )


def decrypt(record: WatermarkRecord, key: ArnoldKey) -> PairIndexSet:
    """Unscramble the record's bitmap and recover the pair set.

    A wrong key almost surely scatters one-bits into the zero padding beyond
    rank M or changes nothing recognizable; both structural violations are
    rejected rather than returning a bogus set.
    """
    if key.N_g != record.N_g:
        raise ValueError(f"key grid side {key.N_g} != record N_g {record.N_g}")
    try:
        payload = bytes.fromhex(record.cipher_bits)
    except ValueError as exc:
        raise CorruptRecordError("cipher payload is not valid hex") from exc
    n_cells = record.N_g * record.N_g
    if len(payload) != (n_cells + 7) // 8:
        raise CorruptRecordError(
            f"cipher payload has {len(payload)} bytes, expected {(n_cells + 7) // 8}"
        )
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="big")
    if bits[n_cells:].any():
        raise CorruptRecordError("nonzero bits beyond the grid")
    grid = bits[:n_cells].reshape(record.N_g, record.N_g)
    plain = arnold_inverse(grid, key).reshape(-1)
    ranks = np.nonzero(plain)[0]
    if len(ranks) != record.K:
        raise DecryptError(
            f"structural check failed: popcount {len(ranks)} != K={record.K}"
        )
    if ranks.size and int(ranks[-1]) >= record.M:
        raise DecryptError(
            f"structural check failed: one-bit at rank {int(ranks[-1])} >= M={record.M}"
        )
    pairs = frozenset(pair_from_index(int(k), record.P) for k in ranks)
    return PairIndexSet(record.P, pairs)


def overlap(a: PairIndexSet, b: PairIndexSet) -> float:
    """Fraction of shared pairs |a n b| / K between two equal-size pair sets."""
    if len(a) != len(b):
        raise ValueError(f"size mismatch: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("empty pair sets")
    return len(a.pairs & b.pairs) / len(a)


@dataclass(frozen=True)
class CalibrationResult:
    """Decision threshold m (and tau = m/K) meeting a target false-positive rate."""

    mode: str
    K: int
    m: int
    tau: float
    achieved_fpr: float
    M: int | None = None


def _binomial_tails(K: int) -> list[Fraction]:
    """tails[m] = P(X >= m) for X ~ Binomial(K, 1/2), exact."""
    pmf = [math.comb(K, i) for i in range(K + 1)]
    denom = 2**K
    tails = [Fraction(0)] * (K + 2)
    for m in range(K, -1, -1):
        tails[m] = tails[m + 1] + Fraction(pmf[m], denom)
    return tails[: K + 1]


def _hypergeometric_tails(K: int, M: int) -> list[Fraction]:
    """tails[m] = P(X >= m) for the overlap of two uniform K-subsets of an M-set."""
    denom = math.comb(M, K)
    pmf = [math.comb(K, i) * math.comb(M - K, K - i) for i in range(K + 1)]
    tails = [Fraction(0)] * (K + 2)
    for m in range(K, -1, -1):
        tails[m] = tails[m + 1] + Fraction(pmf[m], denom)
    return tails[: K + 1]


def calibrate(
    K: int, target_fpr: float, mode: str = "binomial", M: int | None = None
) -> CalibrationResult:
    """Smallest overlap count m whose null tail probability is <= target_fpr.

    Binomial mode models each of the K pairs as an independent fair coin;
    hypergeometric mode models the suspect set as a uniform K-subset of the
    M = C(P,2) pair universe. Tails are exact rational sums; no approximation.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if not 0.0 < target_fpr < 1.0:
        raise ValueError("target_fpr must lie in (0, 1)")
    if mode == "binomial":
        tails = _binomial_tails(K)
    elif mode == "hypergeometric":
        if M is None or M < K:
            raise ValueError("hypergeometric mode requires M >= K")
        tails = _hypergeometric_tails(K, M)
    else:
        raise ValueError(f"unknown calibration mode {mode!r}")
    target = Fraction(target_fpr)
    for m in range(K + 1):
        if tails[m] <= target:
            return CalibrationResult(
                mode=mode,
                K=K,
                m=m,
                tau=m / K,
                achieved_fpr=float(tails[m]),
                M=M if mode == "hypergeometric" else None,
            )
    raise ValueError(
        f"unreachable target: tail({K}) = {float(tails[K]):.3e} > {target_fpr}"
    )


@dataclass(frozen=True)
class VerifyResult:
    authenticated: bool
    eta: float
    overlap_count: int
    threshold_m: int


def verify(
    record: WatermarkRecord,
    key: ArnoldKey,
    suspect: PairIndexSet,
    calib: CalibrationResult,
) -> VerifyResult:
    """Decrypt the registered set and test the suspect's overlap against m.

    The decision compares integer counts (overlap_count >= m), never float
    thresholds.
    """
    if suspect.P != record.P:
        raise ValueError(f"suspect patch count {suspect.P} != record P={record.P}")
    if len(suspect) != record.K:
        raise ValueError(f"suspect has {len(suspect)} pairs, record K={record.K}")
    if calib.K != record.K:
        raise ValueError(f"calibration K={calib.K} != record K={record.K}")
    registered = decrypt(record, key)
    count = len(registered.pairs & suspect.pairs)
    return VerifyResult(
        authenticated=count >= calib.m,
        eta=count / record.K,
        overlap_count=count,
        threshold_m=calib.m,
    )


def record_path(directory: str | Path, content_id: str) -> Path:
    digest = sha256(content_id.encode("utf-8")).hexdigest()
    return Path(directory) / (digest + RECORD_SUFFIX)


def registry_put(
    directory: str | Path, record: WatermarkRecord, *, force: bool = False
) -> Path:
    """Persist a record under sha256(content_id); refuses overwrite unless forced."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = record_path(directory, record.content_id)
    data = record_to_json(record)
    if force:
        path.write_bytes(data)
        return path
    try:
        with open(path, "xb") as fh:
            fh.write(data)
    except FileExistsError:
        raise FileExistsError(
            f"duplicate id: record for {record.content_id!r} already exists "
            f"at {path} (use force to overwrite)"
        ) from None
    return path


def registry_get(directory: str | Path, content_id: str) -> WatermarkRecord:
    """Load and CRC-validate the record stored for content_id."""
    path = record_path(directory, content_id)
    if not path.exists():
        raise MissingRecordError(f"missing record for {content_id!r} in {directory}")
    record = record_from_json(path.read_bytes())
    if record.content_id != content_id:
        raise CorruptRecordError(
            f"record at {path} holds content_id {record.content_id!r}"
        )
    return record
