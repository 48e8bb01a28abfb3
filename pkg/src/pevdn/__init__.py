"""Decentralized value decomposition networks with secure aggregation and DP.

Agents learn a VDN team value without sharing observations or Q-values:
the only coupling term is summed with additive secret sharing, and an
optional DP-SGD layer with a replay-aware accountant bounds what the
updates reveal about any single episode.
"""

from .config import Mode, RunConfig, load_config, parse_config
from .dp import DPConfig, PrivacyLedger, epsilon_for, log_moment, replay_ledger
from .env import ClimbingGame, GridWorld, make_env
from .field import DEFAULT_FIELD, PrimeField, decode, encode, reconstruct, share
from .train import Trainer, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Mode", "RunConfig", "load_config", "parse_config",
    "DPConfig", "PrivacyLedger", "epsilon_for", "log_moment", "replay_ledger",
    "ClimbingGame", "GridWorld", "make_env",
    "DEFAULT_FIELD", "PrimeField", "decode", "encode", "reconstruct", "share",
    "Trainer", "evaluate", "train",
]
