"""
Transport Module

This module provides the byte-exact wire codec for pressure frames, the
follower and leader session state machines, a fault-injecting simulated link
operating in integer ticks, and an optional UDP channel carrying the same
frames one per datagram.

Wire layout (all integers little-endian):

    magic "EARF" | version u8 | frame_type u8 | finger u8 | flags u8 |
    sequence u32 | tick u64 | width u8 | height u8 |
    payload width*height x u16 | crc32 u32 over everything before it
"""

import heapq
import logging
import socket
import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from core_modules.errors import (
    BadMagic,
    ChecksumMismatch,
    FrameError,
    GeometryOverflow,
    GridError,
    MalformedFrame,
    TrailingData,
    TruncatedFrame,
    UnsupportedVersion,
    ValueOverflow,
)
from core_modules.grid import MAX_COUNT, FingerId, GridGeometry, PressureGrid

logger = logging.getLogger("core.transport")

MAGIC = b"EARF"
VERSION = 1
HEADER = struct.Struct("<4sBBBBIQBB")
CRC = struct.Struct("<I")
HEADER_SIZE = HEADER.size
CRC_SIZE = CRC.size
MAX_SEQUENCE = 0xFFFFFFFF
MAX_TICK = 0xFFFFFFFFFFFFFFFF


class FrameType(IntEnum):
    PRESSURE = 0
    STIMULUS_ECHO = 1
    CONTROL = 2


@dataclass(frozen=True)
class WireFrame:
    """Logical content of one wire frame; values are row-major u16 samples."""

    frame_type: FrameType
    finger: FingerId
    sequence: int
    tick: int
    width: int
    height: int
    values: Tuple[int, ...]
    flags: int = 0

    @classmethod
    def from_grid(cls, grid: PressureGrid, finger: FingerId, sequence: int, tick: int,
                  frame_type: FrameType = FrameType.PRESSURE) -> "WireFrame":
        return cls(
            frame_type=FrameType(frame_type),
            finger=FingerId(finger),
            sequence=sequence,
            tick=tick,
            width=grid.width,
            height=grid.height,
            values=grid.flat(),
        )

    def to_grid(self, pitch_mm: float = 2.0) -> PressureGrid:
        geometry = GridGeometry(width=self.width, height=self.height, pitch_mm=pitch_mm)
        return PressureGrid(geometry, np.asarray(self.values, dtype=np.int64))

    @property
    def stream(self) -> Tuple[FingerId, FrameType]:
        return (self.finger, self.frame_type)


def frame_length(width: int, height: int) -> int:
    """Encoded size in bytes of a width x height frame."""
    return HEADER_SIZE + 2 * width * height + CRC_SIZE


def encode(frame: WireFrame) -> bytes:
    """
    Serialize a frame to its wire bytes.

    Raises:
        GeometryOverflow: If width or height is 0 or does not fit in one byte.
        ValueOverflow: If a sample, the sequence or the tick does not fit its field.
        MalformedFrame: If the payload length disagrees with width x height.
    """
    if not (1 <= frame.width <= 255 and 1 <= frame.height <= 255):
        raise GeometryOverflow(f"Frame geometry {frame.width}x{frame.height} outside 1x1..255x255")
    if len(frame.values) != frame.width * frame.height:
        raise MalformedFrame(
            f"Payload has {len(frame.values)} values for a {frame.width}x{frame.height} frame"
        )
    if not 0 <= frame.sequence <= MAX_SEQUENCE:
        raise ValueOverflow(f"Sequence {frame.sequence} does not fit in 32 bits")
    if not 0 <= frame.tick <= MAX_TICK:
        raise ValueOverflow(f"Tick {frame.tick} does not fit in 64 bits")
    if not 0 <= frame.flags <= 255:
        raise ValueOverflow(f"Flags {frame.flags} do not fit in one byte")

    payload = np.asarray(frame.values, dtype=np.int64)
    if payload.size and (payload.min() < 0 or payload.max() > MAX_COUNT):
        raise ValueOverflow(f"Payload values must lie in [0, {MAX_COUNT}]")

    body = HEADER.pack(
        MAGIC,
        VERSION,
        int(frame.frame_type),
        int(frame.finger),
        frame.flags,
        frame.sequence,
        frame.tick,
        frame.width,
        frame.height,
    ) + payload.astype("<u2").tobytes()
    return body + CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def decode_from(data: bytes, offset: int = 0) -> Tuple[WireFrame, int]:
    """
    Decode the frame starting at ``offset`` of a byte stream.

    Checks run in a fixed order: header length, magic, version, declared
    length, CRC, then field values, so each corruption maps to exactly one
    error.

    Returns:
        The frame and the offset just past it.

    Raises:
        TruncatedFrame, BadMagic, UnsupportedVersion, ChecksumMismatch, MalformedFrame
    """
    view = memoryview(data)[offset:]
    if len(view) < HEADER_SIZE:
        raise TruncatedFrame(f"Need {HEADER_SIZE} header bytes, have {len(view)}")

    magic, version, frame_type, finger, flags, sequence, tick, width, height = HEADER.unpack_from(view)
    if magic != MAGIC:
        raise BadMagic(f"Expected magic {MAGIC!r}, got {bytes(magic)!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"Unsupported frame version {version}")

    total = frame_length(width, height)
    if len(view) < total:
        raise TruncatedFrame(f"Frame declares {total} bytes, only {len(view)} available")

    (expected,) = CRC.unpack_from(view, total - CRC_SIZE)
    if zlib.crc32(view[: total - CRC_SIZE]) & 0xFFFFFFFF != expected:
        raise ChecksumMismatch(f"CRC mismatch in frame seq={sequence} tick={tick}")

    try:
        frame_type = FrameType(frame_type)
        finger = FingerId(finger)
    except ValueError as e:
        raise MalformedFrame(str(e))
    if flags != 0:
        raise MalformedFrame(f"Reserved flags byte must be 0, got {flags}")
    if width == 0 or height == 0:
        raise MalformedFrame(f"Frame declares an empty {width}x{height} grid")

    values = np.frombuffer(view[HEADER_SIZE : total - CRC_SIZE], dtype="<u2")
    frame = WireFrame(
        frame_type=frame_type,
        finger=finger,
        sequence=sequence,
        tick=tick,
        width=width,
        height=height,
        values=tuple(int(v) for v in values),
        flags=flags,
    )
    return frame, offset + total


def decode(data: bytes) -> WireFrame:
    """
    Decode exactly one frame.

    Raises:
        TrailingData: If bytes follow a complete, valid frame.
        FrameError: Any of the errors raised by decode_from.
    """
    frame, end = decode_from(data)
    if end != len(data):
        raise TrailingData(f"{len(data) - end} bytes after a complete frame")
    return frame


# --- simulated link ---

class LinkModel(BaseModel):
    """Fault model of the follower-to-leader link, in ticks."""

    latency_ticks: int = Field(default=1, ge=0)
    jitter_ticks: int = Field(default=0, ge=0)
    loss_probability: float = Field(default=0.0, ge=0.0, lt=1.0)
    reorder_probability: float = Field(default=0.0, ge=0.0, lt=1.0)
    rng_seed: int = Field(default=0, ge=0, lt=2 ** 64)


class Delivery(NamedTuple):
    deliver_tick: int
    send_tick: int
    item: Any


@dataclass
class LinkStats:
    sent: int = 0
    dropped: int = 0
    delivered: int = 0
    swapped: int = 0


class SimulatedLink:
    """
    Deterministic lossy link driven by explicit tick advances.

    Each sent frame draws, in order, a loss variate, a jitter offset in
    [-jitter, +jitter] and a reorder variate. A surviving frame is due at
    send_tick + max(0, latency + jitter). A reorder hit holds the frame back
    and swaps its schedule with the next surviving frame.
    """

    def __init__(self, model: Optional[LinkModel] = None):
        self.model = model or LinkModel()
        self.stats = LinkStats()
        self._rng = np.random.default_rng(self.model.rng_seed)
        self._queue: List[Tuple[int, int, Any, int]] = []
        self._held: Optional[Tuple[int, int, Any, int]] = None
        self._sent = 0

    def send(self, send_tick: int, item: Any) -> None:
        model = self.model
        loss_draw = self._rng.random()
        jitter = int(self._rng.integers(-model.jitter_ticks, model.jitter_ticks + 1))
        reorder_draw = self._rng.random()

        index = self._sent
        self._sent += 1
        self.stats.sent += 1
        if loss_draw < model.loss_probability:
            self.stats.dropped += 1
            return

        entry = (send_tick + max(0, model.latency_ticks + jitter), index, item, send_tick)
        if self._held is not None:
            held, self._held = self._held, None
            self.stats.swapped += 1
            heapq.heappush(self._queue, (entry[0], entry[1], held[2], held[3]))
            heapq.heappush(self._queue, (held[0], held[1], entry[2], entry[3]))
        elif reorder_draw < model.reorder_probability:
            self._held = entry
        else:
            heapq.heappush(self._queue, entry)

    def advance(self, tick: int) -> List[Delivery]:
        """Release every queued frame due at or before ``tick``."""
        out = []
        while self._queue and self._queue[0][0] <= tick:
            deliver_tick, _, item, send_tick = heapq.heappop(self._queue)
            out.append(Delivery(deliver_tick, send_tick, item))
        self.stats.delivered += len(out)
        return out

    def flush(self) -> List[Delivery]:
        """Release everything still in flight, including a held frame."""
        if self._held is not None:
            heapq.heappush(self._queue, self._held)
            self._held = None
        return self.advance(MAX_TICK)

    @property
    def in_flight(self) -> int:
        return len(self._queue) + (self._held is not None)


def link_transmit(frames: Iterable[Tuple[int, Any]], model: LinkModel) -> List[Delivery]:
    """
    Push a tick-ordered (send_tick, item) stream through a fresh SimulatedLink.

    Returns:
        Deliveries in arrival order.
    """
    link = SimulatedLink(model)
    for send_tick, item in frames:
        link.send(send_tick, item)
    deliveries = link.flush()
    logger.debug(
        f"Link delivered {link.stats.delivered}/{link.stats.sent} "
        f"(dropped {link.stats.dropped}, swapped {link.stats.swapped})"
    )
    return deliveries


# --- sessions ---

class SessionRole(str, Enum):
    FOLLOWER = "follower"
    LEADER = "leader"


StreamKey = Tuple[FingerId, FrameType]


@dataclass
class SessionState:
    """Per-side bookkeeping; counters only ever grow."""

    role: SessionRole
    last_sequence: Dict[StreamKey, int] = field(default_factory=dict)
    newest_tick: Dict[StreamKey, int] = field(default_factory=dict)
    gap_count: int = 0
    out_of_order_count: int = 0
    handed_off: int = 0
    ignored: int = 0
    decode_errors: int = 0


class FollowerSession:
    """Stamps outgoing grids with per-stream sequence numbers."""

    def __init__(self):
        self.state = SessionState(role=SessionRole.FOLLOWER)

    def next_frame(self, grid: PressureGrid, finger: FingerId, tick: int,
                   frame_type: FrameType = FrameType.PRESSURE) -> WireFrame:
        key = (FingerId(finger), FrameType(frame_type))
        sequence = self.state.last_sequence.get(key, -1) + 1
        if sequence > MAX_SEQUENCE:
            raise ValueOverflow(f"Sequence space exhausted for stream {key}")
        self.state.last_sequence[key] = sequence
        self.state.newest_tick[key] = tick
        return WireFrame.from_grid(grid, finger, sequence, tick, frame_type)

    def encode_grid(self, grid: PressureGrid, finger: FingerId, tick: int) -> bytes:
        return encode(self.next_frame(grid, finger, tick))


def leader_ingest(state: SessionState, frame: WireFrame) -> Optional[PressureGrid]:
    """
    Apply the latest-wins policy to one delivered frame.

    Frames whose tick is not newer than the newest frame already handed off
    on their stream are counted as out-of-order and dropped. Skipped sequence
    numbers are added to the gap count.

    A frame whose payload does not form a grid is counted as a decode error.
    Nothing is raised; every anomaly ends up in a counter.

    Returns:
        The frame's grid for the mapping pipeline, or None if it was dropped.
    """
    if frame.frame_type != FrameType.PRESSURE:
        state.ignored += 1
        return None

    try:
        grid = frame.to_grid()
    except GridError as e:
        state.decode_errors += 1
        logger.warning(f"Discarded frame seq={frame.sequence} with an unusable grid: {e}")
        return None

    key = frame.stream
    newest = state.newest_tick.get(key)
    last = state.last_sequence.get(key)
    if (newest is not None and frame.tick <= newest) or (last is not None and frame.sequence <= last):
        state.out_of_order_count += 1
        logger.debug(f"Dropped stale frame seq={frame.sequence} tick={frame.tick} on {key[0].name}")
        return None

    if last is not None and frame.sequence > last + 1:
        state.gap_count += frame.sequence - last - 1
    state.last_sequence[key] = frame.sequence
    state.newest_tick[key] = frame.tick
    state.handed_off += 1
    return grid


class LeaderSession:
    """Leader side: decodes delivered bytes and hands fresh grids on."""

    def __init__(self):
        self.state = SessionState(role=SessionRole.LEADER)

    def ingest(self, frame: WireFrame) -> Optional[PressureGrid]:
        return leader_ingest(self.state, frame)

    def ingest_bytes(self, data: bytes) -> Optional[Tuple[FingerId, PressureGrid]]:
        """Decode and ingest; a frame that fails to decode only bumps a counter."""
        try:
            frame = decode(data)
        except FrameError as e:
            self.state.decode_errors += 1
            logger.warning(f"Discarded undecodable frame: {type(e).__name__}: {e}")
            return None
        grid = self.ingest(frame)
        return None if grid is None else (frame.finger, grid)


# --- UDP ---

class UdpFrameChannel:
    """One encoded frame per datagram over a UDP socket."""

    MAX_DATAGRAM = 65507

    def __init__(self, host: str = "127.0.0.1", port: int = 0, timeout: float = 1.0):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 22)
        self.sock.bind((host, port))
        self.sock.settimeout(timeout)
        self.address = self.sock.getsockname()

    def send(self, data: bytes, address: Tuple[str, int]) -> None:
        self.sock.sendto(data, address)

    def receive(self) -> Optional[bytes]:
        """Next datagram, or None on timeout."""
        try:
            data, _ = self.sock.recvfrom(self.MAX_DATAGRAM)
        except socket.timeout:
            return None
        return data

    def close(self) -> None:
        self.sock.close()

    def __enter__(self) -> "UdpFrameChannel":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
