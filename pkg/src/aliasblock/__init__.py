"""Balanced confounded block designs for observational studies whose
treatment groups are fixed by eligibility rules."""

from .assignment import optimal_assignment
from .balance import (balance_table, interaction_feature, permutation_balance_pvalue,
                      split_by_contrast, truncated_product)
from .blocks import (BlockDesign, BlockTypePlan, assemble_design, default_plan,
                     pair_of_pairs, pair_within_type, rank_mahalanobis)
from .design import (AliasReport, Contrast, DesignMatrix, alias_relations,
                     contrast_orthogonality, estimable_contrast, full_factorial,
                     interaction_column)
from .inference import (amplify, block_did, did_summary, signed_rank_gamma, tail_transform,
                        wilcoxon_hl)
from .partition import (PartitionProblem, PartitionSolution, brute_force_partition,
                        fixed_size_partition, max_size_partition, run_steps_1_2)
from .population import (IndividualRecord, StudyPopulation, SynthConfig, Template,
                         build_template, derive_group, load_population, standardize,
                         synthesize_population)

__version__ = "0.1.0"
