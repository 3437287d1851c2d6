"""Setup-phase ledger: Lamport one-time signatures, Merkle roots, Hashcash mining.

Serialized layouts (all integers big-endian):

* header: version u32 | prev_hash 32B | merkle_root 32B | timestamp u64 |
  difficulty u32 | nonce u64
* meter payload: epoch u32 | count u32 | count x f64 window energies (Wh)
* transaction: kind u8 | pseudonym 32B | public key 16384B | payload_len u32 |
  payload | signature 8192B
* block: header | tx_count u32 | (tx_len u32 | tx)*
* chain file: "AMLC" | version u16 | difficulty u32 | block_count u32 |
  (block_len u32 | block)* | tip hash 32B
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .errors import CodecError, DoubleSubmission, InvalidArgument, KeyReuseError, MiningFailure, RejectedTransaction

HASH_LEN = 32
KEY_BITS = 256
PUBLIC_KEY_LEN = 2 * KEY_BITS * HASH_LEN
SIGNATURE_LEN = KEY_BITS * HASH_LEN
ZERO_HASH = bytes(HASH_LEN)
BLOCK_VERSION = 1
MAX_DIFFICULTY = 32
NONCE_LIMIT = 2**64

CHAIN_MAGIC = b"AMLC"
CHAIN_FORMAT_VERSION = 1

TX_METER = 0
TX_MODEL = 1

_HEADER = struct.Struct(">I32s32sQIQ")


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# --- Lamport one-time signatures -------------------------------------------

@dataclass(eq=False)
class LamportKeypair:
    secret: List[List[bytes]]
    public: List[List[bytes]]
    used: bool = False

    @property
    def public_bytes(self) -> bytes:
        return b"".join(self.public[0]) + b"".join(self.public[1])

    @property
    def pseudonym(self) -> bytes:
        return sha256(self.public_bytes)


def keygen(seed: Optional[bytes] = None) -> LamportKeypair:
    """Fresh keypair. With ``seed`` the secrets are expanded deterministically via SHA-256."""
    if seed is None:
        secret = [[os.urandom(HASH_LEN) for _ in range(KEY_BITS)] for _ in range(2)]
    else:
        if isinstance(seed, int):
            seed = seed.to_bytes(8, "big", signed=False)
        secret = [
            [sha256(b"lamport" + seed + bytes([b]) + i.to_bytes(2, "big")) for i in range(KEY_BITS)]
            for b in range(2)
        ]
    public = [[sha256(s) for s in row] for row in secret]
    return LamportKeypair(secret, public)


def _digest_bits(message: bytes):
    d = int.from_bytes(sha256(message), "big")
    return [(d >> (KEY_BITS - 1 - i)) & 1 for i in range(KEY_BITS)]


def sign(keypair: LamportKeypair, message: bytes) -> bytes:
    if keypair.used:
        raise KeyReuseError("one-time key has already signed a message")
    keypair.used = True
    return b"".join(keypair.secret[bit][i] for i, bit in enumerate(_digest_bits(message)))


def split_public(public: bytes) -> List[List[bytes]]:
    if len(public) != PUBLIC_KEY_LEN:
        raise CodecError("public key has the wrong length")
    half = KEY_BITS * HASH_LEN
    return [
        [public[b * half + i * HASH_LEN : b * half + (i + 1) * HASH_LEN] for i in range(KEY_BITS)]
        for b in range(2)
    ]


def verify(public, message: bytes, signature: bytes) -> bool:
    if isinstance(public, (bytes, bytearray)):
        try:
            public = split_public(bytes(public))
        except CodecError:
            return False
    if len(signature) != SIGNATURE_LEN:
        return False
    for i, bit in enumerate(_digest_bits(message)):
        if sha256(signature[i * HASH_LEN : (i + 1) * HASH_LEN]) != public[bit][i]:
            return False
    return True


# --- transactions -----------------------------------------------------------

def encode_payload(epoch: int, energies_wh: Sequence[float]) -> bytes:
    e = np.asarray(energies_wh, dtype=np.float64)
    return struct.pack(">II", epoch, len(e)) + e.astype(">f8").tobytes()


def decode_payload(payload: bytes):
    if len(payload) < 8:
        raise CodecError("meter payload too short")
    epoch, count = struct.unpack_from(">II", payload)
    if len(payload) != 8 + 8 * count:
        raise CodecError("meter payload length does not match its count")
    return epoch, np.frombuffer(payload, dtype=">f8", offset=8).astype(np.float64)


@dataclass(frozen=True)
class MeterTransaction:
    pseudonym: bytes
    public_key: bytes
    payload: bytes
    signature: bytes
    kind: int = TX_METER

    @classmethod
    def create(cls, keypair: LamportKeypair, payload: bytes, kind: int = TX_METER) -> "MeterTransaction":
        if not payload:
            raise InvalidArgument("transaction payload must not be empty")
        sig = sign(keypair, payload)
        return cls(keypair.pseudonym, keypair.public_bytes, payload, sig, kind)

    def to_bytes(self) -> bytes:
        return (
            bytes([self.kind])
            + self.pseudonym
            + self.public_key
            + struct.pack(">I", len(self.payload))
            + self.payload
            + self.signature
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "MeterTransaction":
        fixed = 1 + HASH_LEN + PUBLIC_KEY_LEN + 4
        if len(data) < fixed + SIGNATURE_LEN:
            raise CodecError("transaction too short")
        kind = data[0]
        pseudonym = data[1 : 1 + HASH_LEN]
        public = data[1 + HASH_LEN : 1 + HASH_LEN + PUBLIC_KEY_LEN]
        (plen,) = struct.unpack_from(">I", data, fixed - 4)
        if len(data) != fixed + plen + SIGNATURE_LEN:
            raise CodecError("transaction length does not match its payload length")
        payload = data[fixed : fixed + plen]
        return cls(pseudonym, public, payload, data[fixed + plen :], kind)

    def check(self) -> Optional[str]:
        """None when well formed and correctly signed, otherwise the reason."""
        if self.kind not in (TX_METER, TX_MODEL):
            return f"unknown transaction kind {self.kind}"
        if not self.payload:
            return "empty payload"
        if sha256(self.public_key) != self.pseudonym:
            return "pseudonym does not match public key"
        if not verify(self.public_key, self.payload, self.signature):
            return "signature-failure"
        if self.kind == TX_METER:
            try:
                decode_payload(self.payload)
            except CodecError as exc:
                return str(exc)
        return None


def compute_merkle_root(transactions: Iterable) -> bytes:
    """Binary SHA-256 tree over serialized transactions; an odd level repeats its last node."""
    level = [sha256(tx if isinstance(tx, (bytes, bytearray)) else tx.to_bytes()) for tx in transactions]
    if not level:
        return ZERO_HASH
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [sha256(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


# --- blocks and mining ------------------------------------------------------

@dataclass(frozen=True)
class BlockHeader:
    version: int
    prev_hash: bytes
    merkle_root: bytes
    timestamp: int
    difficulty: int
    nonce: int = 0

    def to_bytes(self) -> bytes:
        return _HEADER.pack(self.version, self.prev_hash, self.merkle_root, self.timestamp, self.difficulty, self.nonce)


def hash_block(header: BlockHeader) -> bytes:
    return sha256(header.to_bytes())


def leading_zero_bits(digest: bytes) -> int:
    value = int.from_bytes(digest, "big")
    return len(digest) * 8 - value.bit_length()


def mine(header: BlockHeader, difficulty: Optional[int] = None, max_nonce: int = NONCE_LIMIT) -> int:
    """Lowest nonce whose header hash has at least ``difficulty`` leading zero bits."""
    d = header.difficulty if difficulty is None else difficulty
    if not 0 <= d <= MAX_DIFFICULTY:
        raise InvalidArgument(f"difficulty must be in [0, {MAX_DIFFICULTY}]")
    prefix = hashlib.sha256(header.to_bytes()[:-8])
    shift = 256 - d
    pack = struct.Struct(">Q").pack
    for nonce in range(max_nonce):
        h = prefix.copy()
        h.update(pack(nonce))
        if int.from_bytes(h.digest(), "big") >> shift == 0:
            return nonce
    raise MiningFailure("nonce space exhausted")


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    transactions: tuple = ()

    @property
    def hash(self) -> bytes:
        return hash_block(self.header)

    def to_bytes(self) -> bytes:
        parts = [self.header.to_bytes(), struct.pack(">I", len(self.transactions))]
        for tx in self.transactions:
            raw = tx.to_bytes()
            parts.append(struct.pack(">I", len(raw)))
            parts.append(raw)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Block":
        if len(data) < _HEADER.size + 4:
            raise CodecError("block shorter than its header")
        header = BlockHeader(*_HEADER.unpack_from(data))
        (count,) = struct.unpack_from(">I", data, _HEADER.size)
        pos = _HEADER.size + 4
        txs = []
        for _ in range(count):
            if pos + 4 > len(data):
                raise CodecError("truncated transaction length")
            (n,) = struct.unpack_from(">I", data, pos)
            pos += 4
            if pos + n > len(data):
                raise CodecError("truncated transaction")
            txs.append(MeterTransaction.from_bytes(data[pos : pos + n]))
            pos += n
        if pos != len(data):
            raise CodecError("trailing bytes after last transaction")
        return cls(header, tuple(txs))


@dataclass
class Chain:
    difficulty: int
    blocks: List[Block] = field(default_factory=list)
    # hash of the last block as recorded when it was appended
    tip: bytes = ZERO_HASH
    attempts: List[int] = field(default_factory=list)

    def __len__(self):
        return len(self.blocks)

    def pseudonyms(self) -> set:
        return {tx.pseudonym for b in self.blocks for tx in b.transactions}

    def transactions(self, kind: Optional[int] = None):
        for b in self.blocks:
            for tx in b.transactions:
                if kind is None or tx.kind == kind:
                    yield tx


def _make_block(prev_hash: bytes, txs, timestamp: int, difficulty: int):
    header = BlockHeader(BLOCK_VERSION, prev_hash, compute_merkle_root(txs), int(timestamp), difficulty)
    nonce = mine(header)
    header = BlockHeader(header.version, header.prev_hash, header.merkle_root, header.timestamp, difficulty, nonce)
    return Block(header, tuple(txs)), nonce + 1


def new_chain(difficulty: int, timestamp: int = 0) -> Chain:
    if not 0 <= difficulty <= MAX_DIFFICULTY:
        raise InvalidArgument(f"difficulty must be in [0, {MAX_DIFFICULTY}]")
    genesis, tries = _make_block(ZERO_HASH, [], timestamp, difficulty)
    return Chain(difficulty, [genesis], genesis.hash, [tries])


def append_block(chain: Chain, transactions: Sequence[MeterTransaction], timestamp: int) -> Chain:
    """Mine a block over ``transactions`` and link it to the tip, in place.

    The chain is left untouched when any transaction is rejected.
    """
    seen = chain.pseudonyms()
    for tx in transactions:
        reason = tx.check()
        if reason:
            raise RejectedTransaction(reason)
        if tx.pseudonym in seen:
            raise DoubleSubmission(f"pseudonym {tx.pseudonym.hex()[:16]} already used")
        seen.add(tx.pseudonym)
    block, tries = _make_block(chain.blocks[-1].hash, list(transactions), timestamp, chain.difficulty)
    chain.blocks.append(block)
    chain.tip = block.hash
    chain.attempts.append(tries)
    return chain


@dataclass(frozen=True)
class ValidationResult:
    ok: bool
    index: int = -1
    reason: str = ""

    def __bool__(self):
        return self.ok


def _validate_blocks(
    blocks: Iterable,
    difficulty: int,
    tip: bytes,
    prev: bytes = ZERO_HASH,
    seen: Iterable[bytes] = (),
    start: int = 0,
) -> ValidationResult:
    """Walk blocks in order; items may be :class:`Block` objects or raw block bytes.

    ``prev``, ``seen`` and ``start`` resume the walk after an already
    verified prefix: the predecessor's hash, the pseudonyms it used, and the
    index of the first block given here.
    """
    seen = set(seen)
    i = start - 1
    for i, block in enumerate(blocks, start):
        if not isinstance(block, Block):
            try:
                block = Block.from_bytes(block)
            except CodecError as exc:
                return ValidationResult(False, i, f"codec error: {exc}")
        h = block.header
        if h.version != BLOCK_VERSION:
            return ValidationResult(False, i, f"unsupported block version {h.version}")
        if h.difficulty != difficulty:
            return ValidationResult(False, i, "difficulty differs from chain difficulty")
        if h.prev_hash != prev:
            return ValidationResult(False, i, "prev-hash-mismatch")
        if compute_merkle_root(block.transactions) != h.merkle_root:
            return ValidationResult(False, i, "merkle-mismatch")
        for tx in block.transactions:
            reason = tx.check()
            if reason:
                return ValidationResult(False, i, reason)
            if tx.pseudonym in seen:
                return ValidationResult(False, i, "pseudonym-reuse")
            seen.add(tx.pseudonym)
        digest = block.hash
        if leading_zero_bits(digest) < difficulty:
            return ValidationResult(False, i, "insufficient-proof-of-work")
        prev = digest
    if i < 0:
        return ValidationResult(False, 0, "empty chain")
    if prev != tip:
        return ValidationResult(False, max(i, 0), "tip-hash-mismatch")
    return ValidationResult(True)


def validate_chain(chain) -> ValidationResult:
    """Check links, proof of work, Merkle roots, signatures and pseudonym uniqueness.

    Accepts a :class:`Chain` or its serialized bytes; never raises on bad input.
    """
    if isinstance(chain, (bytes, bytearray)):
        return validate_chain_bytes(bytes(chain))
    return _validate_blocks(chain.blocks, chain.difficulty, chain.tip)


def serialize_chain(chain: Chain) -> bytes:
    parts = [CHAIN_MAGIC, struct.pack(">HII", CHAIN_FORMAT_VERSION, chain.difficulty, len(chain.blocks))]
    for b in chain.blocks:
        raw = b.to_bytes()
        parts.append(struct.pack(">I", len(raw)))
        parts.append(raw)
    parts.append(chain.tip)
    return b"".join(parts)


def _split_chain(data: bytes):
    """Returns (difficulty, raw block list, tip); raises CodecError with a block index attached."""
    if len(data) < 14 or data[:4] != CHAIN_MAGIC:
        raise CodecError("bad chain magic")
    version, difficulty, count = struct.unpack_from(">HII", data, 4)
    if version != CHAIN_FORMAT_VERSION:
        raise CodecError(f"unsupported chain format version {version}")
    pos = 14
    raws = []
    for i in range(count):
        if pos + 4 > len(data):
            raise _IndexedCodecError(i, "truncated block length")
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4
        if pos + n > len(data) - HASH_LEN:
            raise _IndexedCodecError(i, "truncated block")
        raws.append(data[pos : pos + n])
        pos += n
    if pos + HASH_LEN != len(data):
        raise _IndexedCodecError(max(count - 1, 0), "chain trailer has the wrong length")
    return difficulty, raws, data[pos:]


class _IndexedCodecError(CodecError):
    def __init__(self, index: int, message: str):
        super().__init__(message)
        self.index = index


def deserialize_chain(data: bytes) -> Chain:
    difficulty, raws, tip = _split_chain(data)
    blocks = []
    for i, raw in enumerate(raws):
        try:
            blocks.append(Block.from_bytes(raw))
        except CodecError as exc:
            raise _IndexedCodecError(i, str(exc)) from None
    return Chain(difficulty, blocks, tip, [])


def validate_chain_bytes(data: bytes) -> ValidationResult:
    try:
        chain = deserialize_chain(data)
    except _IndexedCodecError as exc:
        return ValidationResult(False, exc.index, f"codec error: {exc}")
    except (CodecError, struct.error) as exc:
        return ValidationResult(False, 0, f"codec error: {exc}")
    return validate_chain(chain)


def validate_block_bytes(
    raw_blocks: Sequence[bytes],
    difficulty: int,
    tip: bytes,
    prev_hash: bytes = ZERO_HASH,
    seen: Iterable[bytes] = (),
    start: int = 0,
) -> ValidationResult:
    """Validate individually serialized blocks, parsing each only when it is reached.

    With ``prev_hash``, ``seen`` and ``start`` the check resumes after a prefix
    that was already validated, which is how the tamper fuzzer avoids
    re-verifying untouched blocks for every flipped bit.
    """
    return _validate_blocks(raw_blocks, difficulty, tip, prev_hash, seen, start)
