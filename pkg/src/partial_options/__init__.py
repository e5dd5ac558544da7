"""Partial option models, affordances and SMDP planning on tabular MDPs."""
from .mdp_core import TabularMDP, policy_value, random_mdp, value_iteration
from .options import (Dataset, Option, OptionTransition, collect_transitions, execute_option, pretrain_taxi_options,
                      primitive_options, random_options)
from .option_models import (DivergenceError, LearnedModel, MissingEntryError, OptionModel, empirical_option_model,
                            exact_option_model, masked_loss, train_partial_model)
from .affordances import (AffordanceClassifier, AffordanceSet, Intent, LivenessError, classifier_affordance_set,
                          derive_affordances, taxi_heuristic_affordances, taxi_intents, train_affordance_classifier)
from .planner import evaluate_success, policy_over_options, smdp_qvi
from .bounds import bound_report, certify_bounds, planning_loss_bound, sample_complexity, value_loss_bound
from .harness import ExperimentConfig, run_experiment, run_learned_affordance_sweep, run_seed

__version__ = "0.1.0"
