from .ddpg import DdpgAgent, DdpgConfig
from .dqn import DqnAgent, DqnConfig
from .nn import Adam, Mlp, RunningNorm
from .policy import PolicyFormatError, load_policy, save_policy
from .replay import ReplayBuffer, Transition

__all__ = ["Adam", "DdpgAgent", "DdpgConfig", "DqnAgent", "DqnConfig", "Mlp", "PolicyFormatError",
           "ReplayBuffer", "RunningNorm", "Transition", "load_policy", "save_policy"]
