from .base import (
    AuthError,
    Backend,
    BackendError,
    BackendRequest,
    BackendResponse,
    ContextLengthError,
    MissingRecording,
    Source,
    TransportError,
    Usage,
)
from .mock import MODES, FailureModeProfile, MockBackend
from .openai import API_KEY_ENV, OpenAICompatBackend
from .replay import RecordingBackend, ReplayBackend, ReplayStore

__all__ = [
    "API_KEY_ENV",
    "AuthError",
    "Backend",
    "BackendError",
    "BackendRequest",
    "BackendResponse",
    "ContextLengthError",
    "FailureModeProfile",
    "MODES",
    "MissingRecording",
    "MockBackend",
    "OpenAICompatBackend",
    "RecordingBackend",
    "ReplayBackend",
    "ReplayStore",
    "Source",
    "TransportError",
    "Usage",
]
