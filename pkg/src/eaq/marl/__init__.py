from .env import (
    FIRST_ATTACK,
    NOOP,
    POLICY_EPSILON,
    EnvConfig,
    FocusFireEnv,
    available_actions,
    behavior_policy,
    generate_offline_dataset,
    rollout,
    scripted_action,
)
from .learner import (
    AgentNet,
    GreedyPolicy,
    LearnerConfig,
    QMixer,
    TrainResult,
    bcq_admissible,
    cql_penalty,
    episodes_to_transitions,
    train_offline,
)
from .metrics import EvalResult, cooperation_metric, coverage_statistic, evaluate
