"""Canonical binary layouts for the simulated wire and replayable transcripts.

Field vectors travel as little-endian 64-bit limbs behind a u64 length
prefix; named bundles add a u16-length-prefixed UTF-8 name per vector.
A message envelope is {iteration, round, sender, recipient, type, payload}
with broadcast encoded as recipient = -1; a transcript is a headered stream
of envelopes closed by the SHA-256 of everything before it.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass

import numpy as np

BROADCAST = -1

_ENV_HEAD = struct.Struct("<qqqqH")  # iteration, round, sender, recipient, type-tag len


class RejectTranscript(ValueError):
    """Transcript bytes fail their integrity hash or framing."""


def pack_vector(vec) -> bytes:
    arr = np.asarray(vec, dtype=np.uint64)
    return struct.pack("<Q", arr.size) + arr.tobytes()


def unpack_vector(buf: memoryview, offset: int):
    (n,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    arr = np.frombuffer(buf, dtype="<u8", count=n, offset=offset).astype(np.int64)
    return arr, offset + 8 * n


def pack_named_vectors(named: dict) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<I", len(named)))
    for name in sorted(named):
        nb = name.encode()
        out.write(struct.pack("<H", len(nb)))
        out.write(nb)
        vec = np.atleast_1d(np.asarray(named[name]))
        if vec.ndim > 1:
            out.write(struct.pack("<B", vec.ndim) + struct.pack(f"<{vec.ndim}Q", *vec.shape))
        else:
            out.write(struct.pack("<B", 1) + struct.pack("<Q", vec.shape[0]))
        flat = vec.reshape(-1).astype(np.uint64)
        out.write(flat.tobytes())
    return out.getvalue()


def unpack_named_vectors(data: bytes) -> dict:
    buf = memoryview(data)
    (count,) = struct.unpack_from("<I", buf, 0)
    offset = 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = bytes(buf[offset:offset + nlen]).decode()
        offset += nlen
        (ndim,) = struct.unpack_from("<B", buf, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}Q", buf, offset)
        offset += 8 * ndim
        n = int(np.prod(shape)) if shape else 0
        arr = np.frombuffer(buf, dtype="<u8", count=n, offset=offset).astype(np.int64)
        offset += 8 * n
        out[name] = arr.reshape(shape)
    return out


@dataclass(frozen=True)
class Envelope:
    iteration: int
    round: int
    sender: int  # -2 for the server
    recipient: int  # BROADCAST for broadcasts
    type_tag: str
    payload: bytes

    def encode(self) -> bytes:
        tag = self.type_tag.encode()
        head = _ENV_HEAD.pack(self.iteration, self.round, self.sender,
                              self.recipient, len(tag))
        return head + tag + struct.pack("<Q", len(self.payload)) + self.payload


SERVER = -2


def decode_envelope(buf: memoryview, offset: int):
    it, rnd, snd, rcp, taglen = _ENV_HEAD.unpack_from(buf, offset)
    offset += _ENV_HEAD.size
    tag = bytes(buf[offset:offset + taglen]).decode()
    offset += taglen
    (plen,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    payload = bytes(buf[offset:offset + plen])
    return Envelope(it, rnd, snd, rcp, tag, payload), offset + plen


MAGIC = b"SRAFLT01"


def write_transcript(path, header: dict, envelopes) -> str:
    body = io.BytesIO()
    body.write(MAGIC)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body.write(struct.pack("<Q", len(head)) + head)
    body.write(struct.pack("<Q", len(envelopes)))
    for env in envelopes:
        body.write(env.encode())
    raw = body.getvalue()
    digest = hashlib.sha256(raw).hexdigest()
    with open(path, "wb") as fh:
        fh.write(raw + bytes.fromhex(digest))
    return digest


def read_transcript(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 32 or raw[: len(MAGIC)] != MAGIC:
        raise RejectTranscript("bad magic or truncated file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise RejectTranscript("integrity hash mismatch")
    buf = memoryview(body)
    offset = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    header = json.loads(bytes(buf[offset:offset + hlen]).decode())
    offset += hlen
    (count,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    envelopes = []
    for _ in range(count):
        env, offset = decode_envelope(buf, offset)
        envelopes.append(env)
    if offset != len(body):
        raise RejectTranscript("trailing bytes after last envelope")
    return header, envelopes


def config_hash(obj) -> str:
    """Stable hash of a JSON-serializable config mapping."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def pack_share(share) -> bytes:
    """owner (i64) | holder (i64) | u64 length | payload limbs, little-endian."""
    head = struct.pack("<qq", share.owner, share.holder)
    return head + pack_vector(share.payload)


def unpack_share(data: bytes):
    from .lcc import Share

    owner, holder = struct.unpack_from("<qq", data, 0)
    payload, _ = unpack_vector(memoryview(data), 16)
    return Share(owner=owner, holder=holder, payload=payload)


def pack_commitment(com) -> bytes:
    """owner (i64) | u64 count | group elements as u64 limbs."""
    return struct.pack("<q", com.owner) + pack_vector(
        np.asarray(com.elements, dtype=np.uint64))


def unpack_commitment(data: bytes):
    from .lcc import CommitmentVector

    (owner,) = struct.unpack_from("<q", data, 0)
    elems, _ = unpack_vector(memoryview(data), 8)
    return CommitmentVector(owner=owner, elements=tuple(int(e) for e in elems))
