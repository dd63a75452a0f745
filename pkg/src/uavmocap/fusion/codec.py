"""Wire format for the per-stage pose/shape exchange.

Layout (little-endian)::

    offset  size  field
    0       8     frame_id   int64
    8       1     stage      uint8 (0 or 1)
    9       3     reserved   zero
    12      504   theta      126 x float32
    516     40    beta       10 x float32

The 544-byte body carries only viewpoint-independent quantities.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..body_model import BETA_DIM, THETA_DIM
from ..errors import MalformedMessage

HEADER = struct.Struct("<qB3x")
HEADER_SIZE = HEADER.size
BODY_FLOATS = THETA_DIM + BETA_DIM
BODY_SIZE = 4 * BODY_FLOATS
MESSAGE_SIZE = HEADER_SIZE + BODY_SIZE
_F32 = np.dtype("<f4")


@dataclass
class StageMessage:
    frame_id: int
    stage: int
    theta: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float32)
        self.beta = np.asarray(self.beta, dtype=np.float32)
        if self.stage not in (0, 1):
            raise MalformedMessage(f"stage must be 0 or 1, got {self.stage}")
        if self.theta.shape != (THETA_DIM,) or self.beta.shape != (BETA_DIM,):
            raise MalformedMessage("message payload has the wrong shape")

    @property
    def num_floats(self) -> int:
        return self.theta.size + self.beta.size


def encode_message(m: StageMessage) -> bytes:
    if not (np.all(np.isfinite(m.theta)) and np.all(np.isfinite(m.beta))):
        raise MalformedMessage("refusing to encode a non-finite payload")
    body = np.concatenate([m.theta, m.beta]).astype(_F32).tobytes()
    return HEADER.pack(int(m.frame_id), int(m.stage)) + body


def decode_message(data: bytes) -> StageMessage:
    if len(data) != MESSAGE_SIZE:
        raise MalformedMessage(f"expected {MESSAGE_SIZE} bytes, got {len(data)}")
    if data[9:12] != b"\x00\x00\x00":
        raise MalformedMessage("reserved header bytes must be zero")
    frame_id, stage = HEADER.unpack_from(data)
    if stage not in (0, 1):
        raise MalformedMessage(f"invalid stage {stage}")
    payload = np.frombuffer(data, dtype=_F32, offset=HEADER_SIZE, count=BODY_FLOATS)
    if not np.all(np.isfinite(payload)):
        raise MalformedMessage("payload contains NaN or infinity")
    return StageMessage(frame_id, stage, payload[:THETA_DIM].copy(), payload[THETA_DIM:].copy())


def body_bytes(data: bytes) -> bytes:
    return data[HEADER_SIZE:]
