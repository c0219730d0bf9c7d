from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

from typing_extensions import TYPE_CHECKING, List, Optional

if TYPE_CHECKING:
    from ..harness.training import StepRecord

logger = logging.getLogger(__name__)


@dataclass
class Callback(ABC):
    """
    Callback is an abstract base class (ABC) reacting to the steps of a training run.
    It provides a flexible mechanism for subclasses to implement custom behaviors to be triggered
    whenever a step finished, e.g. writing telemetry or logging progress.
    """

    _is_paused = False
    """
    Flag that indicates if the callback is paused.
    """

    def notify(self, record: StepRecord):
        """
        Notify the callback that a training step finished.
        """
        if self._is_paused:
            pass
        else:
            self._notify(record)

    @abstractmethod
    def _notify(self, record: StepRecord):
        """
        Notify the callback that a training step finished.
        Override this method to implement custom behaviors.
        """
        raise NotImplementedError

    @abstractmethod
    def stop(self):
        """
        Stop the callback and release whatever it holds.
        """
        raise NotImplementedError

    def pause(self):
        """
        Pause the callback such that notify does not trigger anymore.
        """
        self._is_paused = True

    def resume(self):
        """
        Resume the callback such that notify does trigger again.
        """
        self._is_paused = False


@dataclass
class StepHistoryCallback(Callback):
    """
    Keeps every step record in memory.
    """

    records: List[StepRecord] = field(default_factory=list)

    def _notify(self, record: StepRecord):
        self.records.append(record)

    def stop(self):
        pass

    @property
    def last(self) -> Optional[StepRecord]:
        return self.records[-1] if self.records else None
