"""Agent entry point: ``python -m pilotkit.agent <bootstrap.json>``."""

import logging
import signal
import sys

from .agent import Agent, AgentConfig


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: python -m pilotkit.agent <bootstrap.json>", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    agent = Agent(AgentConfig.load(argv[0]))
    signal.signal(signal.SIGTERM, lambda *_: agent.close("terminated"))
    signal.signal(signal.SIGINT, lambda *_: agent.close("interrupted"))
    agent.start()
    # wake up regularly so signal handlers get to run
    while not agent.wait(0.2):
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
