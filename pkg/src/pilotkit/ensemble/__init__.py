"""Ensemble layer: pipelines of stages of tasks, executed through the runtime."""

from .appmanager import AppManager, ResManager, TaskManager, WFProcessor
from .entities import Pipeline, ProcessType, Stage, Task, translate_task, validate_workflow
from .state import AppManagerState, Control

__all__ = ["AppManager", "AppManagerState", "Control", "Pipeline", "ProcessType", "ResManager", "Stage",
           "Task", "TaskManager", "WFProcessor", "translate_task", "validate_workflow"]
