"""Gate-control-list scheduling and learned flow admission for 802.1Qbv networks."""
from .env import EnvConfig, TsnEnv, decode_action, reward_B, reward_O, reward_S
from .gcl import GateControlList, GateEvent, export_gcl, load_gcl
from .model import Flow, FlowKind, Topology, build_topology, load_flows, load_topology
from .scheduler import BudgetExceeded, Infeasible, ScheduleAssignment, solve_static, verify_schedule
from .simulator import Simulator, SimMetrics, run
from .td3 import Td3Agent, Td3Config, train_loop

__all__ = [
    "EnvConfig", "TsnEnv", "decode_action", "reward_B", "reward_O", "reward_S",
    "GateControlList", "GateEvent", "export_gcl", "load_gcl",
    "Flow", "FlowKind", "Topology", "build_topology", "load_flows", "load_topology",
    "BudgetExceeded", "Infeasible", "ScheduleAssignment", "solve_static", "verify_schedule",
    "Simulator", "SimMetrics", "run", "Td3Agent", "Td3Config", "train_loop",
]
__version__ = "0.1.0"
