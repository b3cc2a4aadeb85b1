"""Per-pilot agent: slot table, launch commands, staging and the runtime."""

from .agent import Agent, AgentConfig, InProcessAgent, sandbox_dir, staging_dir
from .launch import LaunchCommand, build_launch_command, execute_unit
from .slots import Placement, SlotRequest, SlotTable, allocate_slots, release_slots
from .staging import collect_outputs, link_inputs

__all__ = [
    "Agent", "AgentConfig", "InProcessAgent", "LaunchCommand", "Placement", "SlotRequest",
    "SlotTable", "allocate_slots", "build_launch_command", "collect_outputs", "execute_unit",
    "link_inputs", "release_slots", "sandbox_dir", "staging_dir",
]
