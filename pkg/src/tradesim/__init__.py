"""Deterministic trading-cluster simulator and schedulers.

Subsystems: workload generation (`workload`), discrete-time cluster
simulation (`cluster`), three-level cache (`cache`), GA+RL hybrid
scheduler (`hybrid`), PPO scheduler (`drl`), LSTM load predictor
(`lstm`), metrics (`report`) and the CLI harness (`cli`).
"""

__version__ = "0.1.0"
