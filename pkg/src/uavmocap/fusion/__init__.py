from .codec import BODY_SIZE, HEADER_SIZE, MESSAGE_SIZE, StageMessage, decode_message, encode_message
from .sync import DropLog, TimedFrame, match_frames
from .simulator import (
    AccessAudit, JitterModel, SessionResult, TimingModel, WindowResult, run_session,
    simulate_frame_window, simulate_frame_window_threaded,
)

__all__ = [
    "BODY_SIZE", "HEADER_SIZE", "MESSAGE_SIZE", "StageMessage", "decode_message", "encode_message",
    "DropLog", "TimedFrame", "match_frames",
    "AccessAudit", "JitterModel", "SessionResult", "TimingModel", "WindowResult", "run_session",
    "simulate_frame_window", "simulate_frame_window_threaded",
]
