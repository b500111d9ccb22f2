"""A few epochs of TD3 against the random baseline on the same arrival stream.

Run: python3 demos/short_training.py [epochs]
"""
import sys

from tsnsched.env import DATA_DIR, EnvConfig, TsnEnv, load_flow_mix
from tsnsched.model import load_flows, load_topology
from tsnsched.td3 import Td3Agent, Td3Config, metrics_csv, train_loop


def make_env(topo, flows):
    return TsnEnv(topo, flows, load_flow_mix(), EnvConfig(max_requests=50), seed=0)


def main():
    epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5
    topo = load_topology(DATA_DIR / "two_bridge_topology.json")
    flows = load_flows(DATA_DIR / "static_flows.csv", topo)

    env = make_env(topo, flows)
    agent = Td3Agent(env.action_dim, Td3Config(warmup=100, batch_size=32), seed=0)
    log = train_loop(env, agent, epochs)
    print("TD3")
    print(metrics_csv(log), end="")
    print(f"{agent.steps} environment steps, {agent.updates} gradient steps")

    baseline = train_loop(make_env(topo, flows), None, epochs, mode="random", seed=0)
    print("random policy")
    print(metrics_csv(baseline), end="")


if __name__ == "__main__":
    main()
