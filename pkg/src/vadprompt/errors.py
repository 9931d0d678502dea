"""Exception hierarchy.

Everything a user can fix by editing inputs derives from :class:`InputError`
(CLI exit code 2); anything raised after the backend gave up derives from
:class:`BackendError` (exit code 3).
"""

from __future__ import annotations


class VadPromptError(Exception):
    pass


class InputError(VadPromptError):
    pass


class EmptyClassList(InputError):
    def __init__(self) -> None:
        super().__init__("class list is empty")


class MissingClass(InputError):
    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"class header not found: {name!r}")


class NoQuestions(InputError):
    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"class {name!r} has no questions")


class MalformedFile(InputError):
    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


class DimensionMismatch(InputError):
    pass


class MissingEmbedding(InputError):
    def __init__(self, question: str) -> None:
        self.question = question
        super().__init__(f"no embedding for question {question!r}")


class InvalidStop(InputError):
    pass


class NoGroupsFound(InputError):
    def __init__(self) -> None:
        super().__init__("no 'Group N: <name>' headings found")


class GroupSizeViolation(InputError):
    def __init__(self, group: str, size: int) -> None:
        self.group = group
        self.size = size
        super().__init__(f"group {group!r} has {size} questions, expected 2-3")


class BudgetOutOfRange(InputError):
    pass


class ModeSetMismatch(InputError):
    pass


class DegenerateLabels(InputError):
    def __init__(self) -> None:
        super().__init__("AUC needs both normal and abnormal labels")


class MissingVerdict(InputError):
    def __init__(self, video_id: str) -> None:
        self.video_id = video_id
        super().__init__(f"no verdict for video {video_id!r}")


class UnknownDataset(InputError):
    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"unknown dataset {name!r}")


class EmptySeenSet(InputError):
    def __init__(self) -> None:
        super().__init__("seen class set is empty")


class ManifestError(InputError):
    pass


class ConfigError(InputError):
    pass


class BackendError(VadPromptError):
    """Raised once a backend call has exhausted its retry budget.

    ``cache_key`` identifies the request for diagnosis; ``video_id`` is filled in
    by the inference layer.
    """

    def __init__(self, message: str, cache_key: str | None = None, video_id: str | None = None) -> None:
        self.cache_key = cache_key
        self.video_id = video_id
        super().__init__(message)


class Timeout(BackendError):
    pass


class HttpStatus(BackendError):
    def __init__(self, code: int, cache_key: str | None = None, body: str = "") -> None:
        self.code = code
        self.body = body
        super().__init__(f"HTTP {code}", cache_key=cache_key)


class MalformedResponse(BackendError):
    pass


class CacheMiss(BackendError):
    pass


class UnknownVideo(BackendError):
    def __init__(self, video_id: str | None) -> None:
        super().__init__(f"scripted oracle has no ground truth for {video_id!r}", video_id=video_id)
